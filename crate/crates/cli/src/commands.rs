use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use urkle_core::data::{load_idx, synth_blobs};
use urkle_core::rng::stream;
use urkle_core::{
    evaluate, load_bundle, save_bundle, train, train_probe, AuditOptions, Classifier, Dataset, EpochRecord,
    LossBreakdown, MetricsRecord, ModelBundle, TrainingSink, UrkleError,
};

use crate::config::{DataSource, RunConfig};
use crate::error::CliError;

pub const AUDIT_HEADER: &str = "epsilon,steps,kl_steps,mc_samples,clean_loss,adv_loss,mean_max_kl,bound_rhs,slack,status";

/// Stream id for audit noise, apart from the training streams.
const AUDIT_STREAM: u64 = 7 << 32;

pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    cfg.check_paths()?;
    Ok(match &cfg.data {
        DataSource::Blobs {
            classes,
            dim,
            separation,
            train_size,
            test_size,
            seed,
        } => (
            synth_blobs(*train_size, *classes, *dim, *separation, *seed)?,
            synth_blobs(*test_size, *classes, *dim, *separation, seed.wrapping_add(1))?,
        ),
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_size,
            test_size,
        } => {
            let train = load_idx(train_images, train_labels)?;
            let test = load_idx(test_images, test_labels)?;
            (
                train_size.map_or(train.clone(), |n| train.take(n)),
                test_size.map_or(test.clone(), |n| test.take(n)),
            )
        }
    })
}

fn create_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

struct CsvSink {
    dir: PathBuf,
    csv: BufWriter<File>,
    last_checkpoint: Option<PathBuf>,
}

impl TrainingSink for CsvSink {
    fn step(&mut self, _step: usize, _loss: &LossBreakdown) {}

    fn epoch(&mut self, record: &EpochRecord) -> urkle_core::Result<()> {
        writeln!(self.csv, "{}", record.csv_row())?;
        self.csv.flush()?;
        eprintln!(
            "epoch {} total {:.4} task {:.4} prior {:.4} robust {:.4}",
            record.epoch, record.total, record.task_term, record.prior_term, record.robust_term
        );
        Ok(())
    }

    fn checkpoint(&mut self, epoch: usize, bundle: &ModelBundle<f32>) -> urkle_core::Result<()> {
        let path = self.dir.join(format!("checkpoint_e{epoch:04}.urkl"));
        save_bundle(bundle, &path)?;
        self.last_checkpoint = Some(path);
        Ok(())
    }
}

pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<PathBuf, CliError> {
    let (train_data, _) = load_data(cfg)?;
    create_dir(out)?;
    write_file(&out.join("run.conf"), &cfg.to_text())?;
    let csv_path = out.join("metrics.csv");
    let mut csv = BufWriter::new(File::create(&csv_path)?);
    writeln!(csv, "{}", EpochRecord::CSV_HEADER)?;
    csv.flush()?;
    let mut sink = CsvSink {
        dir: out.to_path_buf(),
        csv,
        last_checkpoint: None,
    };
    let bundle = match train(&cfg.train_config(), &train_data, &mut sink) {
        Ok(b) => b,
        Err(e @ UrkleError::NumericAbort { .. }) => {
            if let Some(p) = &sink.last_checkpoint {
                eprintln!("last good checkpoint: {}", p.display());
            }
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let path = out.join("checkpoint.urkl");
    save_bundle(&bundle, &path)?;
    Ok(path)
}

pub fn probe(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let (train_data, test_data) = load_data(cfg)?;
    let bundle = read_checkpoint(checkpoint)?;
    let train_data = match cfg.labels_per_run {
        Some(budget) => train_data.label_budget(budget, cfg.seed)?,
        None => train_data,
    };
    let classifier = train_probe(&bundle.encoder, &train_data, &cfg.probe_config())?;
    create_dir(out)?;
    let record = audit_one(cfg, &bundle, &classifier, &test_data, 0.0)?;
    let mut probed = bundle;
    probed.spec.classifier = Some(*classifier.spec());
    probed.classifier = Some(classifier);
    let path = out.join("probe.urkl");
    save_bundle(&probed, &path)?;
    write_file(
        &out.join("probe_metrics.csv"),
        &format!("{}\n{}\n", MetricsRecord::CSV_HEADER, record.csv_row()),
    )?;
    println!(
        "probe clean accuracy {:.4} on {} test inputs",
        record.clean_accuracy,
        test_data.len()
    );
    Ok(path)
}

fn read_checkpoint(path: &Path) -> Result<ModelBundle<f32>, CliError> {
    if !path.is_file() {
        return Err(CliError::Io(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(load_bundle(path)?)
}

/// Encoder from `checkpoint`, classifier from `probe` when given, otherwise
/// from the checkpoint itself.
fn load_models(checkpoint: &Path, probe: Option<&Path>) -> Result<(ModelBundle<f32>, Classifier<f32>), CliError> {
    let bundle = read_checkpoint(checkpoint)?;
    let classifier = match probe {
        Some(p) => read_checkpoint(p)?.classifier,
        None => bundle.classifier.clone(),
    };
    let classifier = classifier.ok_or_else(|| CliError::Config {
        line: 0,
        message: "no classifier: pass --probe or a checkpoint trained with a classifier".into(),
    })?;
    if classifier.net().input_shape() != [bundle.encoder.d_z(), 1, 1] {
        return Err(CliError::Config {
            line: 0,
            message: "probe does not match the encoder's representation width".into(),
        });
    }
    Ok((bundle, classifier))
}

fn audit_one(
    cfg: &RunConfig,
    bundle: &ModelBundle<f32>,
    classifier: &Classifier<f32>,
    data: &Dataset,
    epsilon: f64,
) -> Result<MetricsRecord, CliError> {
    let options = AuditOptions {
        mc_samples: cfg.mc_samples,
        kl_steps: cfg.audit_kl_steps,
        chunk_size: cfg.chunk_size,
    };
    let mut rng = stream(cfg.seed, AUDIT_STREAM);
    Ok(evaluate(
        &bundle.encoder,
        classifier,
        data,
        &cfg.attack(epsilon),
        &cfg.objective,
        &options,
        &mut rng,
    )?)
}

pub fn attack(cfg: &RunConfig, checkpoint: &Path, probe: Option<&Path>, out: &Path) -> Result<Vec<MetricsRecord>, CliError> {
    let (_, test_data) = load_data(cfg)?;
    let (bundle, classifier) = load_models(checkpoint, probe)?;
    create_dir(out)?;
    let mut text = format!("{}\n", MetricsRecord::CSV_HEADER);
    let mut records = Vec::new();
    for &eps in &cfg.epsilons {
        let r = audit_one(cfg, &bundle, &classifier, &test_data, eps)?;
        println!(
            "epsilon {eps}: clean accuracy {:.4}, adversarial accuracy {:.4}",
            r.clean_accuracy, r.adversarial_accuracy
        );
        text.push_str(&r.csv_row());
        text.push('\n');
        records.push(r);
    }
    write_file(&out.join("attack.csv"), &text)?;
    Ok(records)
}

pub fn audit(cfg: &RunConfig, checkpoint: &Path, probe: Option<&Path>, out: &Path) -> Result<Vec<MetricsRecord>, CliError> {
    let (_, test_data) = load_data(cfg)?;
    let (bundle, classifier) = load_models(checkpoint, probe)?;
    create_dir(out)?;
    let mut text = format!("{AUDIT_HEADER}\n");
    let mut records = Vec::new();
    for &eps in &cfg.epsilons {
        let r = audit_one(cfg, &bundle, &classifier, &test_data, eps)?;
        let status = if r.slack >= 0.0 { "ok" } else { "violated" };
        if r.slack < 0.0 {
            eprintln!(
                "FLAGGED: epsilon {eps}: adversarial loss {:.6} exceeds bound {:.6} (slack {:.6})",
                r.adv_loss, r.bound_rhs, r.slack
            );
        } else {
            println!("epsilon {eps}: bound {:.6} >= adversarial loss {:.6}", r.bound_rhs, r.adv_loss);
        }
        text.push_str(&format!(
            "{},{},{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{status}\n",
            r.epsilon,
            r.steps,
            cfg.audit_kl_steps,
            r.mc_samples,
            r.clean_loss,
            r.adv_loss,
            r.mean_max_kl,
            r.bound_rhs,
            r.slack
        ));
        records.push(r);
    }
    write_file(&out.join("audit.csv"), &text)?;
    Ok(records)
}
