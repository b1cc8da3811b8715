//! Flat `key = value` run configuration.
//!
//! The file format is one assignment per line, `#` comments, blank lines
//! ignored. Unknown keys are errors that name the key. Command-line overrides
//! are applied after the file is read.
//!
//! Recognized keys:
//!
//! ```text
//! # run identity / layout
//! run_id        = demo              # default: "<command>-s<seed>"
//! out           = runs              # output root directory
//! seed          = 7                 # master seed for all substreams
//!
//! # training
//! steps         = 20000             # required for training commands
//! batch_size    = 128
//! lr            = 1e-4
//! warmup_steps  = 1000
//! ema_decay     = 0.999
//! use_ema       = true
//! p             = 0.75              # flow ratio (pretrain forces 1.0)
//! cfg_scale     = 2.0               # teacher guidance scale
//! cfg_dropout   = 0.1               # pretrain condition dropout
//! time_dist     = sorted_uniform    # or: lognormal
//! time_mu       = -0.4              # lognormal only
//! time_sigma    = 1.0               # lognormal only
//! loss_form     = squared           # or: unsquared
//!
//! # model
//! hidden_dim     = 256
//! hidden_layers  = 3
//! time_embed_dim = 32
//! cond_embed_dim = 32
//!
//! # data
//! dataset     = gauss_mixture_8     # two_moons | checkerboard | one_d_bimodal
//! labeled     = true
//! moons_noise = 0.1
//!
//! # inputs for distill / sample / eval
//! teacher    = runs/pre/checkpoints/model.ckpt
//! checkpoint = runs/distill/checkpoints/model.ckpt
//!
//! # sampling / evaluation
//! sampler     = few_step            # or: euler
//! k           = 1
//! euler_steps = 10
//! n_samples   = 2000
//! eval_probes = 512
//! bandwidth   = 0.5                 # optional; default median heuristic
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;

use splitmeanflow::data::ToyDataset;
use splitmeanflow::error::{Error, Result};
use splitmeanflow::flow::TimeDist;
use splitmeanflow::model::NetConfig;
use splitmeanflow::smf::{LossForm, TrainMode, TrainPlan};

const KNOWN_KEYS: &[&str] = &[
    "run_id",
    "out",
    "seed",
    "steps",
    "batch_size",
    "lr",
    "warmup_steps",
    "ema_decay",
    "use_ema",
    "p",
    "cfg_scale",
    "cfg_dropout",
    "time_dist",
    "time_mu",
    "time_sigma",
    "loss_form",
    "hidden_dim",
    "hidden_layers",
    "time_embed_dim",
    "cond_embed_dim",
    "dataset",
    "labeled",
    "moons_noise",
    "teacher",
    "checkpoint",
    "sampler",
    "k",
    "euler_steps",
    "n_samples",
    "eval_probes",
    "bandwidth",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    Distill,
    MeanflowDistill,
    Sample,
    Eval,
    Verify,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Distill => "distill",
            Command::MeanflowDistill => "meanflow-distill",
            Command::Sample => "sample",
            Command::Eval => "eval",
            Command::Verify => "verify",
        }
    }
}

/// Values overridable from the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub p: Option<f64>,
    pub cfg_scale: Option<f64>,
    pub k: Option<usize>,
    pub out: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    FewStep,
    Euler,
}

/// Fully resolved configuration for one run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub command: Command,
    pub run_id: String,
    pub out_dir: PathBuf,
    pub plan: TrainPlan,
    pub dataset: ToyDataset,
    pub teacher: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub sampler: SamplerKind,
    pub k: usize,
    pub euler_steps: usize,
    pub n_samples: usize,
    pub eval_probes: usize,
    pub bandwidth: Option<f64>,
    /// Normalized snapshot of every effective key, for the run directory.
    pub snapshot: BTreeMap<String, String>,
}

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{raw}`",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!("duplicate config key `{key}`")));
        }
    }
    Ok(map)
}

struct Reader<'a> {
    map: &'a BTreeMap<String, String>,
}

impl<'a> Reader<'a> {
    fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`"))),
        }
    }

    fn parse_required<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        match self.get(key) {
            None => Err(Error::Config(format!("missing required key `{key}`"))),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`"))),
        }
    }
}

/// Resolve a config file body plus overrides into a full `RunConfig`.
pub fn resolve(command: Command, text: &str, overrides: &Overrides) -> Result<RunConfig> {
    let mut map = parse_kv(text)?;
    if let Some(v) = overrides.seed {
        map.insert("seed".into(), v.to_string());
    }
    if let Some(v) = overrides.steps {
        map.insert("steps".into(), v.to_string());
    }
    if let Some(v) = overrides.p {
        map.insert("p".into(), v.to_string());
    }
    if let Some(v) = overrides.cfg_scale {
        map.insert("cfg_scale".into(), v.to_string());
    }
    if let Some(v) = overrides.k {
        map.insert("k".into(), v.to_string());
    }
    if let Some(v) = &overrides.out {
        map.insert("out".into(), v.clone());
    }
    let r = Reader { map: &map };

    let dataset = ToyDataset::parse(
        r.get("dataset").unwrap_or("gauss_mixture_8"),
        r.parse("labeled", true)?,
        r.parse("moons_noise", 0.1)?,
    )?;

    let seed: u64 = r.parse("seed", 0)?;
    let is_training = matches!(
        command,
        Command::Pretrain | Command::Distill | Command::MeanflowDistill
    );
    let steps: usize = if is_training {
        r.parse_required("steps")?
    } else {
        r.parse("steps", 0)?
    };

    let time_dist = match r.get("time_dist").unwrap_or("sorted_uniform") {
        "sorted_uniform" => TimeDist::SortedUniform,
        "lognormal" => TimeDist::Lognormal {
            mu: r.parse("time_mu", -0.4)?,
            sigma: r.parse("time_sigma", 1.0)?,
        },
        other => return Err(Error::Config(format!("key `time_dist`: unknown value `{other}`"))),
    };
    let loss_form = match r.get("loss_form").unwrap_or("squared") {
        "squared" => LossForm::Squared,
        "unsquared" => LossForm::Unsquared,
        other => return Err(Error::Config(format!("key `loss_form`: unknown value `{other}`"))),
    };

    let mode = match command {
        Command::Distill | Command::MeanflowDistill => TrainMode::Distill,
        _ => TrainMode::FromScratch,
    };
    let mut flow_ratio_p: f64 = r.parse("p", 0.75)?;
    if command == Command::Pretrain {
        if r.get("p").is_some() && flow_ratio_p != 1.0 {
            return Err(Error::Config(
                "pretraining is the boundary-only objective; `p` must be 1.0 or unset".into(),
            ));
        }
        flow_ratio_p = 1.0;
    }

    let time_embed_dim = r.parse("time_embed_dim", 32)?;
    let net = NetConfig {
        data_dim: dataset.dim(),
        hidden_dim: r.parse("hidden_dim", 256)?,
        hidden_layers: r.parse("hidden_layers", 3)?,
        time_embed_dim,
        num_classes: dataset.num_classes(),
        cond_embed_dim: r.parse("cond_embed_dim", time_embed_dim)?,
    };

    let plan = TrainPlan {
        mode,
        flow_ratio_p,
        cfg_scale_w: r.parse("cfg_scale", 2.0)?,
        cfg_dropout_pretrain: r.parse("cfg_dropout", 0.1)?,
        cfg_dropout_distill: 0.0,
        batch_size: r.parse("batch_size", 128)?,
        steps,
        lr: r.parse("lr", 1e-4)?,
        warmup_steps: r.parse("warmup_steps", 1000)?,
        ema_decay: r.parse("ema_decay", 0.999)?,
        use_ema: r.parse("use_ema", true)?,
        time_dist,
        loss_form,
        seed,
        net,
    };
    plan.validate()?;

    let sampler = match r.get("sampler").unwrap_or("few_step") {
        "few_step" => SamplerKind::FewStep,
        "euler" => SamplerKind::Euler,
        other => return Err(Error::Config(format!("key `sampler`: unknown value `{other}`"))),
    };

    let teacher = r.get("teacher").map(PathBuf::from);
    if mode == TrainMode::Distill && teacher.is_none() {
        return Err(Error::Config(format!(
            "`{}` requires the `teacher` key (path to a pretrain checkpoint)",
            command.name()
        )));
    }
    let checkpoint = r.get("checkpoint").map(PathBuf::from);
    if matches!(command, Command::Sample | Command::Eval) && checkpoint.is_none() {
        return Err(Error::Config(format!(
            "`{}` requires the `checkpoint` key",
            command.name()
        )));
    }

    let run_id = r
        .get("run_id")
        .map(str::to_string)
        .unwrap_or_else(|| format!("{}-s{seed}", command.name()));
    let out_dir = PathBuf::from(r.get("out").unwrap_or("runs"));

    let cfg = RunConfig {
        command,
        run_id,
        out_dir,
        plan,
        dataset,
        teacher,
        checkpoint,
        sampler,
        k: r.parse("k", 1)?,
        euler_steps: r.parse("euler_steps", 10)?,
        n_samples: r.parse("n_samples", 2000)?,
        eval_probes: r.parse("eval_probes", 512)?,
        bandwidth: match r.get("bandwidth") {
            None => None,
            Some(v) => Some(v.parse().map_err(|_| {
                Error::Config(format!("key `bandwidth`: cannot parse `{v}`"))
            })?),
        },
        snapshot: BTreeMap::new(),
    };
    Ok(RunConfig {
        snapshot: snapshot_of(&cfg),
        ..cfg
    })
}

/// Normalized key = value lines capturing the effective configuration.
fn snapshot_of(cfg: &RunConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let p = &cfg.plan;
    m.insert("run_id".into(), cfg.run_id.clone());
    m.insert("out".into(), cfg.out_dir.display().to_string());
    m.insert("seed".into(), p.seed.to_string());
    m.insert("steps".into(), p.steps.to_string());
    m.insert("batch_size".into(), p.batch_size.to_string());
    m.insert("lr".into(), p.lr.to_string());
    m.insert("warmup_steps".into(), p.warmup_steps.to_string());
    m.insert("ema_decay".into(), p.ema_decay.to_string());
    m.insert("use_ema".into(), p.use_ema.to_string());
    m.insert("p".into(), p.flow_ratio_p.to_string());
    m.insert("cfg_scale".into(), p.cfg_scale_w.to_string());
    m.insert("cfg_dropout".into(), p.cfg_dropout_pretrain.to_string());
    match p.time_dist {
        TimeDist::SortedUniform => {
            m.insert("time_dist".into(), "sorted_uniform".into());
        }
        TimeDist::Lognormal { mu, sigma } => {
            m.insert("time_dist".into(), "lognormal".into());
            m.insert("time_mu".into(), mu.to_string());
            m.insert("time_sigma".into(), sigma.to_string());
        }
    }
    m.insert(
        "loss_form".into(),
        match p.loss_form {
            LossForm::Squared => "squared".into(),
            LossForm::Unsquared => "unsquared".into(),
        },
    );
    m.insert("hidden_dim".into(), p.net.hidden_dim.to_string());
    m.insert("hidden_layers".into(), p.net.hidden_layers.to_string());
    m.insert("time_embed_dim".into(), p.net.time_embed_dim.to_string());
    m.insert("cond_embed_dim".into(), p.net.cond_embed_dim.to_string());
    m.insert("dataset".into(), cfg.dataset.name().into());
    m.insert("labeled".into(), cfg.dataset.labeled().to_string());
    if let ToyDataset::TwoMoons { noise, .. } = cfg.dataset {
        m.insert("moons_noise".into(), noise.to_string());
    }
    if let Some(t) = &cfg.teacher {
        m.insert("teacher".into(), t.display().to_string());
    }
    if let Some(c) = &cfg.checkpoint {
        m.insert("checkpoint".into(), c.display().to_string());
    }
    m.insert(
        "sampler".into(),
        match cfg.sampler {
            SamplerKind::FewStep => "few_step".into(),
            SamplerKind::Euler => "euler".into(),
        },
    );
    m.insert("k".into(), cfg.k.to_string());
    m.insert("euler_steps".into(), cfg.euler_steps.to_string());
    m.insert("n_samples".into(), cfg.n_samples.to_string());
    m.insert("eval_probes".into(), cfg.eval_probes.to_string());
    if let Some(bw) = cfg.bandwidth {
        m.insert("bandwidth".into(), bw.to_string());
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named_in_the_error() {
        let err = resolve(Command::Pretrain, "stepz = 5\n", &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let text = "# full run\nsteps = 10\n\ndataset = gauss_mixture_8 # ring\n";
        let cfg = resolve(Command::Pretrain, text, &Overrides::default()).unwrap();
        assert_eq!(cfg.plan.steps, 10);
        assert_eq!(cfg.plan.flow_ratio_p, 1.0);
    }

    #[test]
    fn overrides_beat_file_values() {
        let text = "steps = 10\nseed = 1\n";
        let ov = Overrides {
            steps: Some(99),
            seed: Some(7),
            ..Overrides::default()
        };
        let cfg = resolve(Command::Pretrain, text, &ov).unwrap();
        assert_eq!(cfg.plan.steps, 99);
        assert_eq!(cfg.plan.seed, 7);
        assert_eq!(cfg.run_id, "pretrain-s7");
    }

    #[test]
    fn distill_requires_teacher_key() {
        let err = resolve(Command::Distill, "steps = 5\n", &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("teacher"), "{err}");
    }

    #[test]
    fn pretrain_rejects_partial_flow_ratio() {
        let err =
            resolve(Command::Pretrain, "steps = 5\np = 0.5\n", &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("p"), "{err}");
    }

    #[test]
    fn conditional_net_follows_labeled_dataset() {
        let cfg = resolve(
            Command::Pretrain,
            "steps = 5\ndataset = two_moons\nlabeled = false\n",
            &Overrides::default(),
        )
        .unwrap();
        assert_eq!(cfg.plan.net.num_classes, 0);
        let cfg = resolve(
            Command::Pretrain,
            "steps = 5\ndataset = two_moons\n",
            &Overrides::default(),
        )
        .unwrap();
        assert_eq!(cfg.plan.net.num_classes, 2);
    }
}
