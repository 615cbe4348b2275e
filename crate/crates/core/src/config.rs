//! Flat `key = value` run configuration with `--key value` overrides.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::competition::CompetitionConfig;
use crate::error::{Error, Result};
use crate::losses::RampSchedule;
use crate::synthdata::{labeled_count, AugmentSpec, BatchSpec, SceneSpec};
use crate::trainer::{TrainConfig, TrainMode, TutoringPolicy};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: TrainMode,
    pub seed: u64,
    pub data_seed: u64,
    pub iterations: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub labeled_fraction: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub alpha: f64,
    pub lambda_max: f64,
    /// `None` ramps over 40% of the iterations.
    pub ramp_iters: Option<usize>,
    pub tutoring: TutoringPolicy,
    pub competition: CompetitionConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_warmup: usize,
    pub checkpoint_every: usize,
    pub trace_distances: bool,
    pub shared_init: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: t.mode,
            seed: 0,
            data_seed: 0,
            iterations: t.iterations,
            batch_labeled: t.batch.labeled,
            batch_unlabeled: t.batch.unlabeled,
            labeled_fraction: 0.1,
            n_train: 200,
            n_test: 50,
            image_size: 64,
            alpha: t.alpha,
            lambda_max: t.ramp.lambda_max,
            ramp_iters: None,
            tutoring: t.tutoring,
            competition: t.competition,
            lr: t.lr,
            weight_decay: t.weight_decay,
            ema_warmup: t.ema_warmup,
            checkpoint_every: t.checkpoint_every,
            trace_distances: t.trace_distances,
            shared_init: t.shared_init,
            out: PathBuf::from("runs/default"),
        }
    }
}

pub const KEYS: [&str; 22] = [
    "mode",
    "seed",
    "data_seed",
    "iterations",
    "batch_labeled",
    "batch_unlabeled",
    "labeled_fraction",
    "n_train",
    "n_test",
    "image_size",
    "alpha",
    "lambda_max",
    "ramp_iters",
    "tutoring",
    "competition",
    "lr",
    "weight_decay",
    "ema_warmup",
    "checkpoint_every",
    "trace_distances",
    "shared_init",
    "out",
];

fn parse_num<T: std::str::FromStr>(field: &'static str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(field, format!("cannot parse {value:?}")))
}

fn parse_float(field: &'static str, value: &str) -> Result<f64> {
    let v: f64 = parse_num(field, value)?;
    if !v.is_finite() {
        return Err(Error::config(field, format!("{value:?} is not finite")));
    }
    Ok(v)
}

fn parse_bool(field: &'static str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(field, format!("cannot parse {value:?} as a boolean"))),
    }
}

fn normalize_key(key: &str) -> String {
    key.trim().trim_start_matches("--").replace('-', "_")
}

impl RunConfig {
    /// Sets one field from its text form. Keys accept `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = normalize_key(key);
        let value = value.trim();
        let field = KEYS
            .iter()
            .copied()
            .find(|k| *k == key)
            .ok_or_else(|| Error::config("key", format!("unknown configuration key {key:?}")))?;
        let wrap = |e: Error| match e {
            Error::Config { .. } => e,
            other => Error::config(field, other.to_string()),
        };
        match field {
            "mode" => self.mode = value.parse().map_err(wrap)?,
            "seed" => self.seed = parse_num(field, value)?,
            "data_seed" => self.data_seed = parse_num(field, value)?,
            "iterations" => self.iterations = parse_num(field, value)?,
            "batch_labeled" => self.batch_labeled = parse_num(field, value)?,
            "batch_unlabeled" => self.batch_unlabeled = parse_num(field, value)?,
            "labeled_fraction" => self.labeled_fraction = parse_float(field, value)?,
            "n_train" => self.n_train = parse_num(field, value)?,
            "n_test" => self.n_test = parse_num(field, value)?,
            "image_size" => self.image_size = parse_num(field, value)?,
            "alpha" => self.alpha = parse_float(field, value)?,
            "lambda_max" => self.lambda_max = parse_float(field, value)?,
            "ramp_iters" => {
                self.ramp_iters = match value {
                    "auto" => None,
                    v => Some(parse_num(field, v)?),
                }
            }
            "tutoring" => self.tutoring = value.parse().map_err(wrap)?,
            "competition" => self.competition = CompetitionConfig::parse(value).map_err(wrap)?,
            "lr" => self.lr = parse_float(field, value)?,
            "weight_decay" => self.weight_decay = parse_float(field, value)?,
            "ema_warmup" => self.ema_warmup = parse_num(field, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(field, value)?,
            "trace_distances" => self.trace_distances = parse_bool(field, value)?,
            "shared_init" => self.shared_init = parse_bool(field, value)?,
            "out" => {
                if value.is_empty() {
                    return Err(Error::config("out", "empty output directory"));
                }
                self.out = PathBuf::from(value)
            }
            _ => unreachable!("every key is handled"),
        }
        Ok(())
    }

    /// Applies a config file's `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config("config", format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Applies `--key value` or `--key=value` pairs in order, last one wins.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        let mut i = 0;
        while i < args.len() {
            let arg = args[i].as_ref();
            let Some(flag) = arg.strip_prefix("--") else {
                return Err(Error::config("overrides", format!("expected --key, got {arg:?}")));
            };
            if let Some((k, v)) = flag.split_once('=') {
                self.set(k, v)?;
                i += 1;
                continue;
            }
            let value = args
                .get(i + 1)
                .ok_or_else(|| Error::config("overrides", format!("--{flag} needs a value")))?;
            self.set(flag, value.as_ref())?;
            i += 2;
        }
        Ok(())
    }

    pub fn ramp_iters_resolved(&self) -> usize {
        self.ramp_iters.unwrap_or(self.iterations * 2 / 5)
    }

    pub fn scene(&self) -> SceneSpec {
        let size = self.image_size;
        let defaults = SceneSpec::default();
        if size == defaults.size {
            return defaults;
        }
        let scale = size as f32 / defaults.size as f32;
        SceneSpec {
            size,
            min_semi_axis: (defaults.min_semi_axis * scale).max(1.0),
            max_semi_axis: (defaults.max_semi_axis * scale).max(1.0),
            margin: ((defaults.margin as f32 * scale).round() as usize).max(1),
            ..defaults
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            seed: self.seed,
            iterations: self.iterations,
            batch: BatchSpec {
                labeled: self.batch_labeled,
                unlabeled: self.batch_unlabeled,
            },
            alpha: self.alpha,
            ramp: RampSchedule {
                lambda_max: self.lambda_max,
                ramp_iters: self.ramp_iters_resolved(),
            },
            tutoring: self.tutoring,
            competition: self.competition.clone(),
            lr: self.lr,
            weight_decay: self.weight_decay,
            ema_warmup: self.ema_warmup,
            checkpoint_every: self.checkpoint_every,
            augment: AugmentSpec::default(),
            trace_distances: self.trace_distances,
            shared_init: self.shared_init,
        }
    }

    /// Checks every field before any compute happens.
    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.n_test == 0 {
            return Err(Error::config("n_test", "must be at least 1"));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return Err(Error::config("image_size", format!("{} is not a positive multiple of 4", self.image_size)));
        }
        self.scene().validate()?;
        let n_labeled = labeled_count(self.n_train, self.labeled_fraction)?;
        if self.batch_labeled > n_labeled {
            return Err(Error::config(
                "batch_labeled",
                format!("{} per batch but only {n_labeled} labeled images", self.batch_labeled),
            ));
        }
        if self.mode != TrainMode::SupervisedOnly && self.batch_unlabeled > self.n_train - n_labeled {
            return Err(Error::config(
                "batch_unlabeled",
                format!("{} per batch but only {} unlabeled images", self.batch_unlabeled, self.n_train - n_labeled),
            ));
        }
        Ok(())
    }

    /// Every key with its effective value, one `key = value` line each.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("mode", self.mode.to_string());
        put("seed", self.seed.to_string());
        put("data_seed", self.data_seed.to_string());
        put("iterations", self.iterations.to_string());
        put("batch_labeled", self.batch_labeled.to_string());
        put("batch_unlabeled", self.batch_unlabeled.to_string());
        put("labeled_fraction", format!("{:?}", self.labeled_fraction));
        put("n_train", self.n_train.to_string());
        put("n_test", self.n_test.to_string());
        put("image_size", self.image_size.to_string());
        put("alpha", format!("{:?}", self.alpha));
        put("lambda_max", format!("{:?}", self.lambda_max));
        put("ramp_iters", self.ramp_iters_resolved().to_string());
        put("tutoring", self.tutoring.to_string());
        put("competition", self.competition.label());
        put("lr", format!("{:?}", self.lr));
        put("weight_decay", format!("{:?}", self.weight_decay));
        put("ema_warmup", self.ema_warmup.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("trace_distances", self.trace_distances.to_string());
        put("shared_init", self.shared_init.to_string());
        put("out", self.out.display().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides_last_wins() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nmode = supervised\nalpha=0.9 # trailing\n\nlabeled-fraction = 1.0\n").unwrap();
        c.apply_overrides(&["--alpha", "0.5", "--seed=4", "--alpha", "0.25"]).unwrap();
        assert_eq!(c.mode, TrainMode::SupervisedOnly);
        assert_eq!(c.alpha, 0.25);
        assert_eq!(c.seed, 4);
        assert_eq!(c.labeled_fraction, 1.0);
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["--alpha", "1.5"]).unwrap();
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("alpha"), "{msg}");

        let mut c = RunConfig::default();
        let msg = c.set("tutoring", "sometimes").unwrap_err().to_string();
        assert!(msg.contains("tutoring"), "{msg}");
        let msg = c.set("colour", "red").unwrap_err().to_string();
        assert!(msg.contains("colour"), "{msg}");
        let msg = c.apply_overrides(&["--seed"]).unwrap_err().to_string();
        assert!(msg.contains("needs a value"), "{msg}");

        let mut c = RunConfig::default();
        c.labeled_fraction = 0.001;
        assert!(c.validate().unwrap_err().to_string().contains("labeled_fraction"));
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["--competition", "CE+Jac+Dice", "--tutoring", "alternate", "--lr", "3e-4", "--out", "/tmp/x"])
            .unwrap();
        let text = c.resolved();
        let mut back = RunConfig::default();
        back.apply_text(&text).unwrap();
        assert_eq!(back.resolved(), text);
        assert_eq!(back.train_config(), c.train_config());
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn scene_scales_with_image_size() {
        let mut c = RunConfig::default();
        assert_eq!(c.scene(), SceneSpec::default());
        c.image_size = 32;
        c.scene().validate().unwrap();
    }
}
