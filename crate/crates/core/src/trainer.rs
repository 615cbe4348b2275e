//! The two-student training loop with its EMA teacher, tutoring policies,
//! optimizer, baselines and checkpointed runs.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::{debug, info, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, ParamNodes, ParamVector, Tensor4};
use crate::competition::{batch_score, compete, CompetitionConfig, CompetitionOutcome, Contestant, Metric};
use crate::diagnostics::{prediction_distance, weight_distance, DistanceRecord, DistanceTrace, IterationRecord, MetricLog};
use crate::error::{Error, Result};
use crate::losses::{pseudo_labels, seg_loss, total_loss, LossReport, RampSchedule};
use crate::metrics::{Mask, MetricReport};
use crate::segnet::{save_checkpoint, TinySegSpec};
use crate::synthdata::{AugmentSpec, BatchSampler, BatchSpec, Dataset, Geom, LabeledSample, SegBatch, Student};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Who receives the teacher's mentoring loss in an iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TutoringPolicy {
    NoTutoring,
    TutorBoth,
    /// Student `(iter mod 2) + 1`.
    Alternate,
    TutorWinner,
    TutorLoser,
}

impl TutoringPolicy {
    pub const ALL: [TutoringPolicy; 5] = [
        TutoringPolicy::NoTutoring,
        TutoringPolicy::TutorBoth,
        TutoringPolicy::Alternate,
        TutoringPolicy::TutorWinner,
        TutoringPolicy::TutorLoser,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TutoringPolicy::NoTutoring => "none",
            TutoringPolicy::TutorBoth => "both",
            TutoringPolicy::Alternate => "alternate",
            TutoringPolicy::TutorWinner => "winner",
            TutoringPolicy::TutorLoser => "loser",
        }
    }

    /// Row label used in ablation tables.
    pub fn description(self) -> &'static str {
        match self {
            TutoringPolicy::NoTutoring => "No tutoring",
            TutoringPolicy::TutorBoth => "Tutor both students",
            TutoringPolicy::Alternate => "Alternate students",
            TutoringPolicy::TutorWinner => "Tutor the winner",
            TutoringPolicy::TutorLoser => "Tutor the loser",
        }
    }

    /// Whether `who` is tutored at `iter` given the competition winner.
    pub fn tutors(self, who: Student, iter: usize, winner: Student) -> bool {
        match self {
            TutoringPolicy::NoTutoring => false,
            TutoringPolicy::TutorBoth => true,
            TutoringPolicy::Alternate => who.id() as usize == iter % 2 + 1,
            TutoringPolicy::TutorWinner => who == winner,
            TutoringPolicy::TutorLoser => who != winner,
        }
    }
}

impl fmt::Display for TutoringPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TutoringPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        let policy = match key.as_str() {
            "none" | "notutoring" => TutoringPolicy::NoTutoring,
            "both" | "tutorboth" => TutoringPolicy::TutorBoth,
            "alternate" => TutoringPolicy::Alternate,
            "winner" | "tutorwinner" => TutoringPolicy::TutorWinner,
            "loser" | "tutorloser" => TutoringPolicy::TutorLoser,
            _ => return Err(Error::Argument(format!("unknown tutoring policy {s:?}"))),
        };
        Ok(policy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainMode {
    Dcf,
    MeanTeacherBaseline,
    SupervisedOnly,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::Dcf, TrainMode::MeanTeacherBaseline, TrainMode::SupervisedOnly];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Dcf => "dcf",
            TrainMode::MeanTeacherBaseline => "mean-teacher",
            TrainMode::SupervisedOnly => "supervised",
        }
    }

    /// The network whose test performance a run reports.
    pub fn evaluated_net(self) -> &'static str {
        match self {
            TrainMode::SupervisedOnly => "s1",
            _ => "teacher",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "dcf" => Ok(TrainMode::Dcf),
            "mean-teacher" | "mt" | "meanteacher" => Ok(TrainMode::MeanTeacherBaseline),
            "supervised" | "sup" | "supervised-only" => Ok(TrainMode::SupervisedOnly),
            _ => Err(Error::Argument(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub seed: u64,
    pub iterations: usize,
    pub batch: BatchSpec,
    pub alpha: f64,
    pub ramp: RampSchedule,
    pub tutoring: TutoringPolicy,
    pub competition: CompetitionConfig,
    pub lr: f64,
    pub weight_decay: f64,
    /// Iterations before the teacher starts following the students.
    pub ema_warmup: usize,
    /// Checkpoint period in iterations; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub augment: AugmentSpec,
    pub trace_distances: bool,
    /// Start all three networks from one random draw instead of three.
    pub shared_init: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Dcf,
            seed: 0,
            iterations: 4000,
            batch: BatchSpec::default(),
            alpha: 0.99,
            ramp: RampSchedule {
                lambda_max: 1.0,
                ramp_iters: 1600,
            },
            tutoring: TutoringPolicy::TutorLoser,
            competition: CompetitionConfig::dice(),
            lr: 1e-4,
            weight_decay: 0.01,
            ema_warmup: 0,
            checkpoint_every: 1000,
            augment: AugmentSpec::default(),
            trace_distances: true,
            shared_init: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("{} is outside [0, 1]", self.alpha)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", format!("{} must be positive", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", format!("{} must be non-negative", self.weight_decay)));
        }
        if !(self.ramp.lambda_max.is_finite() && self.ramp.lambda_max >= 0.0) {
            return Err(Error::config("lambda_max", format!("{} must be non-negative", self.ramp.lambda_max)));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        if self.batch.labeled == 0 {
            return Err(Error::config("batch_labeled", "must be at least 1"));
        }
        if self.mode != TrainMode::SupervisedOnly && self.batch.unlabeled == 0 {
            return Err(Error::config("batch_unlabeled", "semi-supervised modes need unlabeled items"));
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.flip_prob) {
            return Err(Error::config("flip_prob", format!("{} is outside [0, 1]", a.flip_prob)));
        }
        if !(a.noise_sigma.is_finite() && a.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma", format!("{} must be non-negative", a.noise_sigma)));
        }
        if !(a.scale_min > 0.0 && a.scale_min <= a.scale_max && a.scale_max.is_finite()) {
            return Err(Error::config("scale_min", format!("bad intensity scale range [{}, {}]", a.scale_min, a.scale_max)));
        }
        Ok(())
    }
}

/// First and second moment estimates for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub step: u64,
}

impl AdamState {
    pub fn new(like: &ParamVector) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay
/// (`p <- p (1 - lr wd)` before the adaptive step).
pub fn adamw_step(
    params: &mut ParamVector,
    grads: &ParamVector,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    params.check_structure(grads, "adamw_step")?;
    params.check_structure(&state.m, "adamw_step")?;
    params.check_structure(&state.v, "adamw_step")?;
    if let Some(bad) = grads.segments().iter().find(|s| s.data.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of segment {}", bad.name)));
    }
    state.step += 1;
    let t = state.step.min(i32::MAX as u64) as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    let segs = params.segments_mut().iter_mut().zip(grads.segments());
    let moments = state.m.segments_mut().iter_mut().zip(state.v.segments_mut().iter_mut());
    for ((p, g), (m, v)) in segs.zip(moments) {
        for i in 0..p.data.len() {
            let gi = g.data[i] as f64;
            let mi = ADAM_BETA1 * m.data[i] as f64 + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v.data[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
            m.data[i] = mi as f32;
            v.data[i] = vi as f32;
            let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            p.data[i] = (p.data[i] as f64 * decay - step) as f32;
        }
    }
    Ok(())
}

/// `alpha * teacher + (1 - alpha) * winner`, elementwise.
pub fn ema_update(teacher: &ParamVector, winner: &ParamVector, alpha: f64) -> Result<ParamVector> {
    teacher.check_structure(winner, "ema_update")?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("EMA decay {alpha} is outside [0, 1]")));
    }
    let mut out = teacher.clone();
    for (o, w) in out.segments_mut().iter_mut().zip(winner.segments()) {
        for (t, &s) in o.data.iter_mut().zip(&w.data) {
            *t = (alpha * *t as f64 + (1.0 - alpha) * s as f64) as f32;
        }
    }
    Ok(out)
}

/// Everything a run carries from one iteration to the next.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub teacher: ParamVector,
    pub s1: ParamVector,
    pub s2: ParamVector,
    pub adam_s1: AdamState,
    pub adam_s2: AdamState,
    pub iter: usize,
    pub previous_winner: Option<Student>,
    pub alpha: f64,
    pub sampler: BatchSampler,
}

impl TrainerState {
    /// Initial parameters are drawn from the run seed. The baselines' teacher
    /// always starts as a copy of its student.
    pub fn new(config: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let net = TinySegSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(5);
        let s1 = net.init_params(rng.next_u64());
        let (s2, teacher) = if config.shared_init || config.mode != TrainMode::Dcf {
            (s1.clone(), s1.clone())
        } else {
            (net.init_params(rng.next_u64()), net.init_params(rng.next_u64()))
        };
        Ok(Self {
            teacher,
            adam_s1: AdamState::new(&s1),
            adam_s2: AdamState::new(&s2),
            s1,
            s2,
            iter: 0,
            previous_winner: None,
            alpha: config.alpha,
            sampler: BatchSampler::new(dataset, config.seed, config.augment),
        })
    }

    pub fn student(&self, who: Student) -> &ParamVector {
        match who {
            Student::S1 => &self.s1,
            Student::S2 => &self.s2,
        }
    }

    pub fn net(&self, name: &str) -> Option<&ParamVector> {
        match name {
            "teacher" => Some(&self.teacher),
            "s1" => Some(&self.s1),
            "s2" => Some(&self.s2),
            _ => None,
        }
    }

    fn student_parts(&mut self, who: Student) -> (&mut ParamVector, &mut AdamState) {
        match who {
            Student::S1 => (&mut self.s1, &mut self.adam_s1),
            Student::S2 => (&mut self.s2, &mut self.adam_s2),
        }
    }
}

/// What one iteration did. Loss reports of networks a mode does not train
/// are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iter: usize,
    pub mode: TrainMode,
    pub lambda: f64,
    pub s1: LossReport,
    pub s2: LossReport,
    pub outcome: Option<CompetitionOutcome>,
    pub dice_s1: f64,
    pub dice_s2: f64,
    /// Teacher-to-contributor distance before and after the EMA update.
    pub ema_distance: Option<(f64, f64)>,
    pub unlabeled_skipped: bool,
    pub distances: DistanceRecord,
}

impl StepReport {
    pub fn winner(&self) -> Option<Student> {
        self.outcome.as_ref().map(|o| o.winner)
    }

    pub fn record(&self) -> IterationRecord {
        let unused = self.mode != TrainMode::Dcf;
        IterationRecord {
            iter: self.iter,
            mode: self.mode.name().to_string(),
            winner: self.winner(),
            lambda: self.lambda,
            l_seg_s1: self.s1.l_seg,
            l_seg_s2: self.s2.l_seg,
            l_cps: if unused { f64::NAN } else { self.s1.l_cps + self.s2.l_cps },
            l_ms: if self.mode == TrainMode::SupervisedOnly { f64::NAN } else { self.s1.l_ms + self.s2.l_ms },
            l_total_s1: self.s1.l_total,
            l_total_s2: self.s2.l_total,
            dice_s1: self.dice_s1,
            dice_s2: self.dice_s2,
            distances: self.distances,
        }
    }
}

fn nan_report() -> LossReport {
    LossReport {
        l_seg: f64::NAN,
        l_cps: f64::NAN,
        l_ms: f64::NAN,
        lambda: f64::NAN,
        l_total: f64::NAN,
    }
}

fn nan_distances(iter: usize) -> DistanceRecord {
    DistanceRecord {
        iter,
        wd_t_s1: f64::NAN,
        wd_t_s2: f64::NAN,
        pd_t_s1: f64::NAN,
        pd_t_s2: f64::NAN,
        pd_s1_s2: f64::NAN,
    }
}

fn concat_items(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let [na, c, h, w] = a.dims();
    if b.dims()[1..] != a.dims()[1..] {
        return Err(Error::shape("concat_items", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor4::new([na + b.batch(), c, h, w], data)
}

/// Probability maps predicted in augmented frames, moved back to the clean frame.
fn probs_to_clean(probs: &Tensor4, geoms: &[Geom]) -> Result<Tensor4> {
    let [n, c, h, w] = probs.dims();
    let mut data = Vec::with_capacity(probs.len());
    for (i, geom) in geoms.iter().enumerate().take(n) {
        for ch in 0..c {
            data.extend(geom.invert(probs.plane(i, ch), h, w));
        }
    }
    Tensor4::new([n, c, h, w], data)
}

/// Hard labels predicted in the `from` frames, moved into the `to` frames.
fn relabel(masks: &[Mask], from: &[Geom], to: &[Geom]) -> Vec<Mask> {
    masks
        .iter()
        .zip(from.iter().zip(to))
        .map(|(m, (f, t))| {
            let (h, w) = m.dims();
            let (ch, cw) = if f.quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
            t.apply_mask(&f.invert_mask(m, ch, cw))
        })
        .collect()
}

/// One student's forward pass over its labeled and unlabeled views.
struct StudentPass {
    graph: Graph,
    params: ParamNodes,
    labeled: NodeId,
    unlabeled: Option<NodeId>,
    truths: Vec<Mask>,
    geoms: Vec<Geom>,
}

impl StudentPass {
    fn run(net: &TinySegSpec, params: &ParamVector, batch: &SegBatch, who: Student, use_unlabeled: bool) -> Result<Self> {
        let (x_lab, truths) = batch.labeled_views(who)?;
        let n_lab = x_lab.batch();
        let (input, geoms) = if use_unlabeled && !batch.unlabeled.is_empty() {
            let (x_unl, geoms) = batch.unlabeled_views(who)?;
            (concat_items(&x_lab, &x_unl)?, geoms)
        } else {
            (x_lab, Vec::new())
        };
        let mut graph = Graph::new();
        let pn = graph.params(params)?;
        let x = graph.constant(input)?;
        let probs = net.forward_on(&mut graph, &pn, x)?;
        let labeled = graph.select_items(probs, 0, n_lab)?;
        let unlabeled = if geoms.is_empty() {
            None
        } else {
            Some(graph.select_items(probs, n_lab, geoms.len())?)
        };
        Ok(Self {
            graph,
            params: pn,
            labeled,
            unlabeled,
            truths,
            geoms,
        })
    }

    fn labeled_probs(&self) -> &Tensor4 {
        self.graph.value(self.labeled).expect("node recorded on this graph")
    }

    fn unlabeled_probs(&self) -> Option<&Tensor4> {
        self.unlabeled.map(|id| self.graph.value(id).expect("node recorded on this graph"))
    }

    fn dice(&self) -> Result<f64> {
        let who = Contestant {
            probs: self.labeled_probs(),
            truths: &self.truths,
        };
        Ok(batch_score(Metric::Dice, who)?.unwrap_or(f64::NAN))
    }

    /// `l_seg + lambda * (cps + ms)` on this student's tape, followed by
    /// backward. Returns the report and the gradient.
    fn finish(
        mut self,
        cps_targets: Option<&[Mask]>,
        ms_targets: Option<&[Mask]>,
        lambda: f64,
    ) -> Result<(LossReport, ParamVector)> {
        let g = &mut self.graph;
        let l_seg = seg_loss(g, self.labeled, &self.truths)?;
        let mut unsup: Option<NodeId> = None;
        let (mut cps_v, mut ms_v) = (0.0, 0.0);
        if let (Some(unl), Some(t)) = (self.unlabeled, cps_targets) {
            let l = seg_loss(g, unl, t)?;
            cps_v = g.value(l)?.item() as f64;
            unsup = Some(l);
        }
        if let (Some(unl), Some(t)) = (self.unlabeled, ms_targets) {
            let l = seg_loss(g, unl, t)?;
            ms_v = g.value(l)?.item() as f64;
            unsup = Some(match unsup {
                Some(u) => g.add(u, l)?,
                None => l,
            });
        }
        let total = match unsup {
            Some(u) => {
                let weighted = g.scale(u, lambda as f32)?;
                g.add(l_seg, weighted)?
            }
            None => l_seg,
        };
        let report = total_loss(g.value(l_seg)?.item() as f64, cps_v, ms_v, lambda)?;
        let grads = g.backward(total)?;
        Ok((report, grads.for_params(&self.params)))
    }
}

fn teacher_clean(net: &TinySegSpec, teacher: &ParamVector, batch: &SegBatch) -> Result<Tensor4> {
    net.forward(teacher, &batch.unlabeled_clean()?, false)
}

/// Applies the EMA update from `contributor` unless still in warm-up and
/// returns the distances before and after.
fn update_teacher(state: &mut TrainerState, contributor: Student, config: &TrainConfig) -> Result<Option<(f64, f64)>> {
    if state.iter < config.ema_warmup {
        return Ok(None);
    }
    let winner = state.student(contributor).clone();
    let before = weight_distance(&state.teacher, &winner)?;
    state.teacher = ema_update(&state.teacher, &winner, state.alpha)?;
    let after = weight_distance(&state.teacher, &winner)?;
    Ok(Some((before, after)))
}

/// One iteration of the two-student framework.
pub fn train_step(state: &mut TrainerState, batch: &SegBatch, config: &TrainConfig) -> Result<StepReport> {
    if batch.labeled.is_empty() {
        return Err(Error::Argument("competition needs at least one labeled item".into()));
    }
    let net = TinySegSpec::default();
    let iter = state.iter;
    let lambda = config.ramp.lambda(iter);
    let unlabeled_skipped = batch.unlabeled.is_empty();
    if unlabeled_skipped {
        warn!("iteration {iter}: no unlabeled items, unsupervised terms skipped");
    }

    let p1 = StudentPass::run(&net, &state.s1, batch, Student::S1, true)?;
    let p2 = StudentPass::run(&net, &state.s2, batch, Student::S2, true)?;

    let outcome = compete(
        Contestant {
            probs: p1.labeled_probs(),
            truths: &p1.truths,
        },
        Contestant {
            probs: p2.labeled_probs(),
            truths: &p2.truths,
        },
        &config.competition,
        state.previous_winner,
    )?;
    let winner = outcome.winner;
    let (dice_s1, dice_s2) = (p1.dice()?, p2.dice()?);

    let tutored = [Student::S1, Student::S2].map(|w| config.tutoring.tutors(w, iter, winner));
    let needs_teacher = !unlabeled_skipped && (tutored.iter().any(|&t| t) || config.trace_distances);
    let teacher_probs = if needs_teacher {
        Some(teacher_clean(&net, &state.teacher, batch)?)
    } else {
        None
    };

    let mut cps = [None, None];
    let mut ms = [None, None];
    let mut distances = nan_distances(iter);
    if let (Some(u1), Some(u2)) = (p1.unlabeled_probs(), p2.unlabeled_probs()) {
        let (h1, h2) = (pseudo_labels(u1), pseudo_labels(u2));
        cps[0] = Some(relabel(&h2, &p2.geoms, &p1.geoms));
        cps[1] = Some(relabel(&h1, &p1.geoms, &p2.geoms));
        if let Some(tp) = &teacher_probs {
            let hard = pseudo_labels(tp);
            for (k, pass) in [&p1, &p2].into_iter().enumerate() {
                if tutored[k] {
                    ms[k] = Some(pass.geoms.iter().zip(&hard).map(|(g, m)| g.apply_mask(m)).collect::<Vec<_>>());
                }
            }
            if config.trace_distances {
                let c1 = probs_to_clean(u1, &p1.geoms)?;
                let c2 = probs_to_clean(u2, &p2.geoms)?;
                distances.pd_t_s1 = prediction_distance(tp, &c1)?;
                distances.pd_t_s2 = prediction_distance(tp, &c2)?;
                distances.pd_s1_s2 = prediction_distance(&c1, &c2)?;
            }
        }
    }

    let [cps1, cps2] = cps;
    let [ms1, ms2] = ms;
    let (r1, g1) = p1.finish(cps1.as_deref(), ms1.as_deref(), lambda)?;
    let (r2, g2) = p2.finish(cps2.as_deref(), ms2.as_deref(), lambda)?;
    for (who, grads) in [(Student::S1, g1), (Student::S2, g2)] {
        let (params, adam) = state.student_parts(who);
        adamw_step(params, &grads, adam, config.lr, config.weight_decay)?;
    }

    let ema_distance = update_teacher(state, winner, config)?;
    if config.trace_distances {
        distances.wd_t_s1 = weight_distance(&state.teacher, &state.s1)?;
        distances.wd_t_s2 = weight_distance(&state.teacher, &state.s2)?;
    }

    state.iter += 1;
    state.previous_winner = Some(winner);
    debug!("iteration {iter}: winner s{} total {:.5}/{:.5}", winner.id(), r1.l_total, r2.l_total);
    Ok(StepReport {
        iter,
        mode: TrainMode::Dcf,
        lambda,
        s1: r1,
        s2: r2,
        outcome: Some(outcome),
        dice_s1,
        dice_s2,
        ema_distance,
        unlabeled_skipped,
        distances,
    })
}

/// Mean Teacher: student 1 against the hardened clean-input teacher on the
/// unlabeled items, teacher following student 1 every iteration.
pub fn mean_teacher_step(state: &mut TrainerState, batch: &SegBatch, config: &TrainConfig) -> Result<StepReport> {
    if batch.labeled.is_empty() {
        return Err(Error::Argument("training needs at least one labeled item".into()));
    }
    let net = TinySegSpec::default();
    let iter = state.iter;
    let lambda = config.ramp.lambda(iter);
    let unlabeled_skipped = batch.unlabeled.is_empty();
    let pass = StudentPass::run(&net, &state.s1, batch, Student::S1, true)?;
    let dice_s1 = pass.dice()?;
    let mut distances = nan_distances(iter);
    let mut targets = None;
    if let Some(u) = pass.unlabeled_probs() {
        let tp = teacher_clean(&net, &state.teacher, batch)?;
        let hard = pseudo_labels(&tp);
        targets = Some(pass.geoms.iter().zip(&hard).map(|(g, m)| g.apply_mask(m)).collect::<Vec<_>>());
        if config.trace_distances {
            distances.pd_t_s1 = prediction_distance(&tp, &probs_to_clean(u, &pass.geoms)?)?;
        }
    }
    let (report, grads) = pass.finish(None, targets.as_deref(), lambda)?;
    adamw_step(&mut state.s1, &grads, &mut state.adam_s1, config.lr, config.weight_decay)?;
    let ema_distance = update_teacher(state, Student::S1, config)?;
    if config.trace_distances {
        distances.wd_t_s1 = weight_distance(&state.teacher, &state.s1)?;
    }
    state.iter += 1;
    Ok(StepReport {
        iter,
        mode: TrainMode::MeanTeacherBaseline,
        lambda,
        s1: report,
        s2: nan_report(),
        outcome: None,
        dice_s1,
        dice_s2: f64::NAN,
        ema_distance,
        unlabeled_skipped,
        distances,
    })
}

/// Student 1 on labeled items only.
pub fn supervised_step(state: &mut TrainerState, batch: &SegBatch, config: &TrainConfig) -> Result<StepReport> {
    if batch.labeled.is_empty() {
        return Err(Error::Argument("training needs at least one labeled item".into()));
    }
    let net = TinySegSpec::default();
    let iter = state.iter;
    let pass = StudentPass::run(&net, &state.s1, batch, Student::S1, false)?;
    let dice_s1 = pass.dice()?;
    let (mut report, grads) = pass.finish(None, None, 0.0)?;
    report.l_cps = f64::NAN;
    report.l_ms = f64::NAN;
    report.lambda = f64::NAN;
    adamw_step(&mut state.s1, &grads, &mut state.adam_s1, config.lr, config.weight_decay)?;
    state.iter += 1;
    Ok(StepReport {
        iter,
        mode: TrainMode::SupervisedOnly,
        lambda: f64::NAN,
        s1: report,
        s2: nan_report(),
        outcome: None,
        dice_s1,
        dice_s2: f64::NAN,
        ema_distance: None,
        unlabeled_skipped: false,
        distances: nan_distances(iter),
    })
}

/// Draws the next batch for `config.mode` and runs one iteration.
pub fn step(state: &mut TrainerState, dataset: &Dataset, config: &TrainConfig) -> Result<StepReport> {
    let spec = match config.mode {
        TrainMode::SupervisedOnly => BatchSpec {
            labeled: config.batch.labeled,
            unlabeled: 0,
        },
        _ => config.batch,
    };
    let batch = state.sampler.next_batch(dataset, spec)?;
    match config.mode {
        TrainMode::Dcf => train_step(state, &batch, config),
        TrainMode::MeanTeacherBaseline => mean_teacher_step(state, &batch, config),
        TrainMode::SupervisedOnly => supervised_step(state, &batch, config),
    }
}

/// Per-image test metrics and their means. Undefined distances are counted
/// and left out of the distance means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub per_image: Vec<MetricReport>,
    pub mean_dice: f64,
    pub mean_jaccard: f64,
    pub mean_hd95: Option<f64>,
    pub mean_asd: Option<f64>,
    pub undefined: usize,
}

impl EvalSummary {
    pub fn from_reports(per_image: Vec<MetricReport>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean_dice = per_image.iter().map(|r| r.dice).sum::<f64>() / n;
        let mean_jaccard = per_image.iter().map(|r| r.jaccard).sum::<f64>() / n;
        let mean_of = |f: fn(&MetricReport) -> Option<f64>| {
            let vals: Vec<f64> = per_image.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let mean_hd95 = mean_of(|r| r.hd95);
        let mean_asd = mean_of(|r| r.asd);
        let undefined = per_image.iter().filter(|r| r.hd95.is_none()).count();
        Self {
            per_image,
            mean_dice,
            mean_jaccard,
            mean_hd95,
            mean_asd,
            undefined,
        }
    }

    /// Per-image rows followed by a `mean` row. Undefined values are `NaN`.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let opt = |v: Option<f64>| crate::diagnostics::format_sig9(v.unwrap_or(f64::NAN));
        let sig = crate::diagnostics::format_sig9;
        writeln!(out, "image,dice,jaccard,hd95,asd,ce")?;
        for (i, r) in self.per_image.iter().enumerate() {
            writeln!(out, "{i},{},{},{},{},{}", sig(r.dice), sig(r.jaccard), opt(r.hd95), opt(r.asd), sig(r.ce))?;
        }
        writeln!(
            out,
            "mean,{},{},{},{},",
            sig(self.mean_dice),
            sig(self.mean_jaccard),
            opt(self.mean_hd95),
            opt(self.mean_asd)
        )?;
        Ok(())
    }
}

const EVAL_CHUNK: usize = 8;

/// Evaluates `params` on every test sample.
pub fn evaluate(params: &ParamVector, test: &[LabeledSample]) -> Result<EvalSummary> {
    let net = TinySegSpec::default();
    let mut reports = Vec::with_capacity(test.len());
    for chunk in test.chunks(EVAL_CHUNK) {
        let planes: Vec<&[f32]> = chunk.iter().map(|s| s.image.pixels.as_slice()).collect();
        let input = Tensor4::from_planes(&planes, chunk[0].image.height, chunk[0].image.width)?;
        let probs = net.forward(params, &input, false)?;
        for (n, sample) in chunk.iter().enumerate() {
            reports.push(MetricReport::evaluate(&probs, n, &sample.mask)?);
        }
    }
    Ok(EvalSummary::from_reports(reports))
}

/// Ground truth scored against itself.
pub fn evaluate_oracle(test: &[LabeledSample]) -> Result<EvalSummary> {
    let reports = test
        .iter()
        .map(|s| MetricReport::from_masks(&s.mask, &s.mask, 0.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary::from_reports(reports))
}

pub struct RunOutput {
    pub state: TrainerState,
    pub records: Vec<IterationRecord>,
    pub trace: DistanceTrace,
    /// Test metrics of the mode's evaluated network.
    pub eval: EvalSummary,
}

fn trained_nets(mode: TrainMode) -> &'static [&'static str] {
    match mode {
        TrainMode::Dcf => &["teacher", "s1", "s2"],
        TrainMode::MeanTeacherBaseline => &["teacher", "s1"],
        TrainMode::SupervisedOnly => &["s1"],
    }
}

fn write_checkpoints(state: &TrainerState, mode: TrainMode, dir: &Path) -> Result<()> {
    for &name in trained_nets(mode) {
        let params = state.net(name).expect("known network name");
        save_checkpoint(params, &dir.join(format!("{name}_{}.ckpt", state.iter)))?;
    }
    Ok(())
}

/// Trains for `config.iterations` iterations and evaluates on the test split.
/// With `out`, writes `metrics.csv`, periodic and final checkpoints, and
/// `eval.csv` there.
pub fn train_run(dataset: &Dataset, config: &TrainConfig, out: Option<&Path>) -> Result<RunOutput> {
    config.validate()?;
    if dataset.labeled.is_empty() {
        return Err(Error::config("labeled_fraction", "dataset has no labeled items"));
    }
    let mut state = TrainerState::new(config, dataset)?;
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let file = fs::File::create(dir.join("metrics.csv"))?;
            Some(MetricLog::new(std::io::BufWriter::new(file))?)
        }
        None => None,
    };
    let mut records = Vec::with_capacity(config.iterations);
    let mut trace = DistanceTrace::default();
    info!("{} run, seed {}, {} iterations", config.mode, config.seed, config.iterations);
    while state.iter < config.iterations {
        let report = step(&mut state, dataset, config)?;
        let record = report.record();
        if let Some(log) = log.as_mut() {
            log.log_iteration(&record)?;
        }
        trace.records.push(report.distances);
        records.push(record);
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && state.iter % config.checkpoint_every == 0 && state.iter < config.iterations {
                write_checkpoints(&state, config.mode, dir)?;
            }
        }
        if state.iter % 500 == 0 {
            info!("iteration {}: l_total_s1 {:.4}", state.iter, report.s1.l_total);
        }
    }
    if let Some(log) = log {
        log.finish()?;
    }
    let evaluated = state.net(config.mode.evaluated_net()).expect("known network name");
    let eval = evaluate(evaluated, &dataset.test)?;
    if let Some(dir) = out {
        write_checkpoints(&state, config.mode, dir)?;
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join("eval.csv"))?);
        eval.write_csv(&mut f)?;
        f.flush()?;
    }
    info!("{} run finished: test Dice {:.4}", config.mode, eval.mean_dice);
    Ok(RunOutput {
        state,
        records,
        trace,
        eval,
    })
}
