//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use urkle_core::{
    AttackConfig, AugmentationPolicy, ClassifierSpec, DecoderSpec, EncoderSpec, Likelihood, Method, ModelSpec,
    ObjectiveConfig, ProbeConfig, ProjectorSpec, TrainConfig,
};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs {
        classes: usize,
        dim: usize,
        separation: f64,
        train_size: usize,
        test_size: usize,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        train_size: Option<usize>,
        test_size: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Mnist,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub data: DataSource,
    pub architecture: Architecture,
    pub d_z: usize,
    pub hidden: usize,
    pub likelihood: Likelihood,
    pub classifier_hidden: usize,
    pub projector_hidden: usize,
    pub projector_out: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub robust_warmup_epochs: usize,
    pub augmentation: String,
    pub train_epsilon: f64,
    pub train_steps: usize,
    pub objective: ObjectiveConfig,
    pub epsilons: Vec<f64>,
    pub attack_steps: usize,
    pub eot_samples: usize,
    pub audit_kl_steps: usize,
    pub mc_samples: usize,
    pub chunk_size: usize,
    pub probe_hidden: usize,
    pub probe_epochs: usize,
    pub probe_batch_size: usize,
    pub probe_lr0: f64,
    pub labels_per_run: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

const KEYS: &[&str] = &[
    "method",
    "dataset",
    "blob_classes",
    "blob_dim",
    "blob_separation",
    "data_seed",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "train_size",
    "test_size",
    "model",
    "d_z",
    "hidden",
    "likelihood",
    "classifier_hidden",
    "projector_hidden",
    "projector_out",
    "epochs",
    "batch_size",
    "lr0",
    "momentum",
    "weight_decay",
    "clip_norm",
    "seed",
    "checkpoint_every",
    "robust_warmup_epochs",
    "augmentation",
    "train_epsilon",
    "train_steps",
    "beta_vae",
    "beta_robust",
    "tau",
    "m_bound",
    "num_classes",
    "epsilon",
    "attack_steps",
    "eot_samples",
    "audit_kl_steps",
    "mc_samples",
    "chunk_size",
    "probe_hidden",
    "probe_epochs",
    "probe_batch_size",
    "probe_lr0",
    "labels_per_run",
    "out_dir",
];

struct Entries {
    values: BTreeMap<&'static str, Vec<(usize, String)>>,
}

impl Entries {
    fn raw(&self, key: &str) -> Option<&(usize, String)> {
        self.values.get(key).and_then(|v| v.last())
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    fn opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.raw(key)
            .map(|(line, v)| {
                v.parse().map_err(|_| CliError::Config {
                    line: *line,
                    message: format!("invalid value `{v}` for `{key}`"),
                })
            })
            .transpose()
    }

    fn required(&self, key: &str) -> Result<String, CliError> {
        self.raw(key).map(|(_, v)| v.clone()).ok_or_else(|| CliError::Config {
            line: 0,
            message: format!("missing required key `{key}`"),
        })
    }

    fn line(&self, key: &str) -> usize {
        self.raw(key).map_or(0, |(l, _)| *l)
    }
}

fn parse_entries(text: &str) -> Result<Entries, CliError> {
    let mut values: BTreeMap<&'static str, Vec<(usize, String)>> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| CliError::Config {
            line,
            message: format!("expected `key = value`, found `{content}`"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let known = KEYS.iter().find(|k| **k == key).ok_or_else(|| CliError::Config {
            line,
            message: format!("unknown key `{key}`"),
        })?;
        let slot = values.entry(known).or_default();
        if !slot.is_empty() && *known != "epsilon" {
            return Err(CliError::Config {
                line,
                message: format!("duplicate key `{key}`"),
            });
        }
        slot.push((line, value.to_string()));
    }
    Ok(Entries { values })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let e = parse_entries(text)?;
        let config_err = |key: &str, message: String| CliError::Config {
            line: e.line(key),
            message,
        };
        let method: Method = e
            .get::<String>("method", "vae_urkle".into())?
            .parse()
            .map_err(|err: urkle_core::UrkleError| config_err("method", err.to_string()))?;
        let dataset = e.get::<String>("dataset", "blobs".into())?;
        let data = match dataset.as_str() {
            "blobs" => DataSource::Blobs {
                classes: e.get("blob_classes", 2)?,
                dim: e.get("blob_dim", 16)?,
                separation: e.get("blob_separation", 6.0)?,
                train_size: e.get("train_size", 1000)?,
                test_size: e.get("test_size", 500)?,
                seed: e.get("data_seed", 0)?,
            },
            "idx" => DataSource::Idx {
                train_images: PathBuf::from(e.required("train_images")?),
                train_labels: PathBuf::from(e.required("train_labels")?),
                test_images: PathBuf::from(e.required("test_images")?),
                test_labels: PathBuf::from(e.required("test_labels")?),
                train_size: e.opt("train_size")?,
                test_size: e.opt("test_size")?,
            },
            other => return Err(config_err("dataset", format!("unknown dataset `{other}` (blobs or idx)"))),
        };
        let architecture = match e.get::<String>("model", default_model(&data).into())?.as_str() {
            "mnist" => Architecture::Mnist,
            "mlp" => Architecture::Mlp,
            other => return Err(config_err("model", format!("unknown model `{other}` (mnist or mlp)"))),
        };
        let likelihood = match e.get::<String>("likelihood", "bernoulli".into())?.as_str() {
            "bernoulli" => Likelihood::Bernoulli,
            "gaussian" => Likelihood::Gaussian,
            other => return Err(config_err("likelihood", format!("unknown likelihood `{other}`"))),
        };
        let augmentation = e.get::<String>("augmentation", "none".into())?;
        if !matches!(augmentation.as_str(), "none" | "digits") {
            return Err(config_err("augmentation", format!("unknown augmentation `{augmentation}` (none or digits)")));
        }
        let d_z = e.get("d_z", if architecture == Architecture::Mnist { 128 } else { 8 })?;
        let defaults = ObjectiveConfig::default();
        let objective = ObjectiveConfig {
            beta_vae: e.get("beta_vae", 0.0)?,
            beta_robust: e.get("beta_robust", defaults.beta_robust)?,
            tau: e.get("tau", defaults.tau)?,
            m_bound: e.get("m_bound", defaults.m_bound)?,
            num_classes: e.get("num_classes", default_classes(&data))?,
        };
        let train_epsilon = e.get("train_epsilon", 0.1)?;
        let epsilons = match e.values.get("epsilon") {
            None => vec![train_epsilon],
            Some(list) => list
                .iter()
                .map(|(line, v)| {
                    v.parse::<f64>().map_err(|_| CliError::Config {
                        line: *line,
                        message: format!("invalid value `{v}` for `epsilon`"),
                    })
                })
                .collect::<Result<_, _>>()?,
        };
        let cfg = Self {
            method,
            data,
            architecture,
            d_z,
            hidden: e.get("hidden", 64)?,
            likelihood,
            classifier_hidden: e.get("classifier_hidden", 1024)?,
            projector_hidden: e.get("projector_hidden", d_z)?,
            projector_out: e.get("projector_out", 128)?,
            epochs: e.get("epochs", 20)?,
            batch_size: e.get("batch_size", 128)?,
            lr0: e.get("lr0", 0.05)?,
            momentum: e.get("momentum", 0.9)?,
            weight_decay: e.get("weight_decay", 5e-4)?,
            clip_norm: e.get("clip_norm", 5.0)?,
            seed: e.get("seed", 0)?,
            checkpoint_every: e.get("checkpoint_every", 1)?,
            robust_warmup_epochs: e.get("robust_warmup_epochs", 0)?,
            augmentation,
            train_epsilon,
            train_steps: e.get("train_steps", 10)?,
            objective,
            epsilons,
            attack_steps: e.get("attack_steps", 40)?,
            eot_samples: e.get("eot_samples", 5)?,
            audit_kl_steps: e.get("audit_kl_steps", 50)?,
            mc_samples: e.get("mc_samples", 20)?,
            chunk_size: e.get("chunk_size", 100)?,
            probe_hidden: e.get("probe_hidden", 1024)?,
            probe_epochs: e.get("probe_epochs", 10)?,
            probe_batch_size: e.get("probe_batch_size", 128)?,
            probe_lr0: e.get("probe_lr0", 0.05)?,
            labels_per_run: e.opt("labels_per_run")?,
            out_dir: e.opt::<String>("out_dir")?.map(PathBuf::from),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|err| CliError::Io(format!("cannot read config {}: {err}", path.display())))?;
        Self::parse(&text)
    }

    fn validate(&self) -> Result<(), CliError> {
        let plain = |message: String| CliError::Config { line: 0, message };
        if self.epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) || !(self.train_epsilon >= 0.0) {
            return Err(plain("epsilon values must be finite and non-negative".into()));
        }
        if self.d_z == 0 || self.hidden == 0 || self.mc_samples == 0 || self.chunk_size == 0 {
            return Err(plain("d_z, hidden, mc_samples and chunk_size must be positive".into()));
        }
        if self.architecture == Architecture::Mnist && !matches!(self.data, DataSource::Idx { .. }) {
            return Err(plain("model = mnist needs dataset = idx".into()));
        }
        let core = |e: urkle_core::UrkleError| plain(e.to_string());
        self.train_config().validate().map_err(core)?;
        self.probe_config().validate().map_err(core)?;
        self.attack(self.epsilons[0]).validate().map_err(core)?;
        Ok(())
    }

    /// Fails unless every data file named by the config exists.
    pub fn check_paths(&self) -> Result<(), CliError> {
        if let DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = &self.data
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                if !p.is_file() {
                    return Err(CliError::Io(format!("data file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match (&self.data, self.architecture) {
            (_, Architecture::Mnist) => [1, 28, 28],
            (DataSource::Blobs { dim, .. }, Architecture::Mlp) => [1, *dim, 1],
            (DataSource::Idx { .. }, Architecture::Mlp) => [1, 28, 28],
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let shape = self.input_shape();
        let (encoder, decoder) = match self.architecture {
            Architecture::Mnist => (EncoderSpec::mnist(self.d_z), {
                let mut d = DecoderSpec::mnist();
                d.likelihood = self.likelihood;
                d
            }),
            Architecture::Mlp => (
                EncoderSpec::mlp(shape, self.hidden, self.d_z),
                DecoderSpec::mlp(shape, self.hidden, self.likelihood),
            ),
        };
        let m = self.method;
        ModelSpec {
            encoder,
            decoder: matches!(m, Method::Vae | Method::VaeUrkle | Method::AeTrades).then_some(decoder),
            projector: (m == Method::SimclrUrkle).then_some(ProjectorSpec {
                hidden: self.projector_hidden,
                out: self.projector_out,
            }),
            classifier: m.is_supervised().then_some(ClassifierSpec {
                hidden: self.classifier_hidden,
                num_classes: self.objective.num_classes,
            }),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig::new(self.method, self.model_spec());
        t.epochs = self.epochs;
        t.batch_size = self.batch_size;
        t.lr0 = self.lr0;
        t.momentum = self.momentum;
        t.weight_decay = self.weight_decay;
        t.clip_norm = self.clip_norm;
        t.seed = self.seed;
        t.checkpoint_every = self.checkpoint_every;
        t.robust_warmup_epochs = self.robust_warmup_epochs;
        t.objective = self.objective;
        t.augmentation = if self.augmentation == "digits" {
            AugmentationPolicy::digits()
        } else {
            AugmentationPolicy::identity()
        };
        let mut attack = AttackConfig::training(self.train_epsilon);
        if self.train_epsilon > 0.0 {
            attack.steps = self.train_steps;
        }
        t.attack = attack;
        t
    }

    pub fn probe_config(&self) -> ProbeConfig {
        let mut p = ProbeConfig::new(self.objective.num_classes);
        p.classifier.hidden = self.probe_hidden;
        p.epochs = self.probe_epochs;
        p.batch_size = self.probe_batch_size;
        p.lr0 = self.probe_lr0;
        p.momentum = self.momentum;
        p.weight_decay = self.weight_decay;
        p.clip_norm = self.clip_norm;
        p.seed = self.seed;
        p
    }

    /// Evaluation attack at `epsilon`: `attack_steps` steps of ε/10.
    pub fn attack(&self, epsilon: f64) -> AttackConfig {
        let mut a = AttackConfig::evaluation(epsilon);
        a.eot_samples = self.eot_samples.max(1);
        if epsilon > 0.0 {
            a.steps = self.attack_steps;
        }
        a
    }

    /// Canonical text form with every key spelled out.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("method", self.method.to_string());
        match &self.data {
            DataSource::Blobs {
                classes,
                dim,
                separation,
                train_size,
                test_size,
                seed,
            } => {
                kv("dataset", "blobs".into());
                kv("blob_classes", classes.to_string());
                kv("blob_dim", dim.to_string());
                kv("blob_separation", separation.to_string());
                kv("train_size", train_size.to_string());
                kv("test_size", test_size.to_string());
                kv("data_seed", seed.to_string());
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_size,
                test_size,
            } => {
                kv("dataset", "idx".into());
                kv("train_images", train_images.display().to_string());
                kv("train_labels", train_labels.display().to_string());
                kv("test_images", test_images.display().to_string());
                kv("test_labels", test_labels.display().to_string());
                if let Some(n) = train_size {
                    kv("train_size", n.to_string());
                }
                if let Some(n) = test_size {
                    kv("test_size", n.to_string());
                }
            }
        }
        kv(
            "model",
            match self.architecture {
                Architecture::Mnist => "mnist",
                Architecture::Mlp => "mlp",
            }
            .into(),
        );
        kv("d_z", self.d_z.to_string());
        kv("hidden", self.hidden.to_string());
        kv(
            "likelihood",
            match self.likelihood {
                Likelihood::Bernoulli => "bernoulli",
                Likelihood::Gaussian => "gaussian",
            }
            .into(),
        );
        kv("classifier_hidden", self.classifier_hidden.to_string());
        kv("projector_hidden", self.projector_hidden.to_string());
        kv("projector_out", self.projector_out.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr0", self.lr0.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("clip_norm", self.clip_norm.to_string());
        kv("seed", self.seed.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("robust_warmup_epochs", self.robust_warmup_epochs.to_string());
        kv("augmentation", self.augmentation.clone());
        kv("train_epsilon", self.train_epsilon.to_string());
        kv("train_steps", self.train_steps.to_string());
        kv("beta_vae", self.objective.beta_vae.to_string());
        kv("beta_robust", self.objective.beta_robust.to_string());
        kv("tau", self.objective.tau.to_string());
        kv("m_bound", self.objective.m_bound.to_string());
        kv("num_classes", self.objective.num_classes.to_string());
        for eps in &self.epsilons {
            kv("epsilon", eps.to_string());
        }
        kv("attack_steps", self.attack_steps.to_string());
        kv("eot_samples", self.eot_samples.to_string());
        kv("audit_kl_steps", self.audit_kl_steps.to_string());
        kv("mc_samples", self.mc_samples.to_string());
        kv("chunk_size", self.chunk_size.to_string());
        kv("probe_hidden", self.probe_hidden.to_string());
        kv("probe_epochs", self.probe_epochs.to_string());
        kv("probe_batch_size", self.probe_batch_size.to_string());
        kv("probe_lr0", self.probe_lr0.to_string());
        if let Some(n) = self.labels_per_run {
            kv("labels_per_run", n.to_string());
        }
        if let Some(d) = &self.out_dir {
            kv("out_dir", d.display().to_string());
        }
        s
    }
}

fn default_model(data: &DataSource) -> &'static str {
    match data {
        DataSource::Blobs { .. } => "mlp",
        DataSource::Idx { .. } => "mnist",
    }
}

fn default_classes(data: &DataSource) -> usize {
    match data {
        DataSource::Blobs { classes, .. } => *classes,
        DataSource::Idx { .. } => 10,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_validate() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut seen = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
        assert_eq!(seen, 3);
    }

    #[test]
    fn defaults_and_comments() {
        let cfg = RunConfig::parse("# blobs run\nmethod = simclr_urkle  # contrastive\n\nepochs=3\n").unwrap();
        assert_eq!(cfg.method, Method::SimclrUrkle);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.architecture, Architecture::Mlp);
        assert_eq!(cfg.objective.num_classes, 2);
        assert_eq!(cfg.epsilons, vec![0.1]);
        assert!(cfg.model_spec().projector.is_some());
        assert!(cfg.model_spec().decoder.is_none());
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = RunConfig::parse("method = vae_urkle\nbetaa_robust = 3\n").unwrap_err();
        match &err {
            CliError::Config { line, message } => {
                assert_eq!(*line, 2);
                assert!(message.contains("betaa_robust"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_values_and_duplicates() {
        for text in [
            "epochs = many",
            "seed = 1\nseed = 2",
            "method = vae-urkle",
            "dataset = cifar",
            "no equals sign",
            "lr0 = -1",
            "dataset = blobs\nmodel = mnist",
            "dataset = idx\ntrain_images = a",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(CliError::Config { .. })), "{text}");
        }
    }

    #[test]
    fn repeated_epsilon_sweeps() {
        let cfg = RunConfig::parse("epsilon = 0\nepsilon = 0.05\nepsilon = 0.1").unwrap();
        assert_eq!(cfg.epsilons, vec![0.0, 0.05, 0.1]);
        assert_eq!(cfg.attack(0.0).steps, 0);
        assert_eq!(cfg.attack(0.1).steps, 40);
    }

    #[test]
    fn canonical_text_roundtrips() {
        let cfg = RunConfig::parse("method = trades\nbeta_robust = 1.5\nepsilon = 0.2\nepsilon = 0.3\nlabels_per_run = 100")
            .unwrap();
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
    }
}
