use std::fs;
use std::path::{Path, PathBuf};

use super::config::{BackboneInit, ExperimentConfig};
use super::report::{write_records, Record};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synth::{generate_dataset, read_dataset, write_dataset, Dataset, Split};
use crate::trainer::{bench_strategies, pretrain_lite, EpochStats, MilModel, Precision, TrainMode, Trainer};
use crate::vit::Backbone;

pub const REPORT_FILE: &str = "report.jsonl";
pub const CHECKPOINT_FILE: &str = "best.ckpt";

pub fn cmd_print_config() -> String {
    ExperimentConfig::default().to_toml()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generates the configured dataset and writes it under `out`. The parent of
/// `out` must exist. Returns the dataset fingerprint.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<u64> {
    let data = generate_dataset(&cfg.data, cfg.train.exec)?;
    write_dataset(&data, out)?;
    let spec = toml::to_string(&cfg.data).expect("spec is representable as TOML");
    let path = out.join("data.toml");
    fs::write(&path, spec).map_err(|e| Error::io(path, e))?;
    Ok(data.fingerprint())
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset_dir {
        Some(dir) => read_dataset(dir),
        None => generate_dataset(&cfg.data, cfg.train.exec),
    }
}

/// The frozen starting backbone, plus a record when it was pretrained.
pub fn build_backbone<S: Scalar>(cfg: &ExperimentConfig) -> Result<(Backbone<S>, Option<Record>)> {
    let vit = cfg.model.clone().with_prompts(0);
    match cfg.backbone.init {
        BackboneInit::Random => Ok((Backbone::init(&vit, cfg.train.seed)?, None)),
        BackboneInit::PretrainLite => {
            let (bb, acc) = pretrain_lite(&vit, &cfg.backbone.pretrain, cfg.train.seed)?;
            let rec = Record::Pretrain {
                steps: cfg.backbone.pretrain.steps,
                probe_accuracy: acc,
            };
            Ok((bb, Some(rec)))
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<Record>,
    pub best_epoch: usize,
    pub val_accuracy: f64,
    pub test: EpochStats,
    pub checkpoint: PathBuf,
}

fn epoch_record(epoch: usize, split: Split, s: &EpochStats, lr: f64, mode: TrainMode) -> Record {
    Record::Epoch {
        epoch,
        split: split.name().into(),
        loss: s.loss,
        accuracy: s.accuracy,
        auroc: s.auroc,
        lr,
        secs_per_bag: s.secs_per_bag,
        strategy: match mode {
            TrainMode::Conventional => "frozen_features".into(),
            _ => "three_step".into(),
        },
    }
}

fn census_record<S: Scalar>(model: &MilModel<S>, mode: TrainMode) -> Record {
    let c = model.census(mode);
    Record::Census {
        mode: mode.name().into(),
        prompt: c.prompt,
        head: c.head,
        backbone: c.backbone,
        backbone_frozen: c.backbone_frozen,
        trainable: c.trainable(),
    }
}

/// Trains from a given backbone on given data; keeps the epoch with the best
/// validation accuracy (lower loss breaks ties), saves it, and evaluates it
/// on the test split.
pub fn train_from<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &Dataset,
    backbone: Backbone<S>,
    out: &Path,
    mut records: Vec<Record>,
) -> Result<TrainOutcome> {
    ensure_dir(out)?;
    let model = MilModel::from_backbone(
        backbone,
        &cfg.head,
        cfg.task,
        cfg.mode,
        cfg.model.num_prompts,
        cfg.train.seed,
    )?;
    for bag in data.train.iter().chain(&data.val).chain(&data.test) {
        cfg.task.check_label(bag.label)?;
        if bag.size != model.backbone.config.image_size || bag.channels != model.backbone.config.channels {
            return Err(Error::DataSpec(format!(
                "bag {} has {}x{}x{} instances, model expects {}x{}x{}",
                bag.bag_id,
                bag.size,
                bag.size,
                bag.channels,
                model.backbone.config.image_size,
                model.backbone.config.image_size,
                model.backbone.config.channels
            )));
        }
    }
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::DataSpec("need non-empty train and test splits".into()));
    }
    records.insert(0, Record::Config { config: cfg.to_toml() });
    records.push(census_record(&model, cfg.mode));

    let mut trainer = Trainer::new(model, cfg.mode, cfg.train.clone())?;
    let mut best: Option<(f64, f64, usize, MilModel<S>)> = None;
    for epoch in 0..cfg.train.epochs {
        let (lr, _) = cfg.train.lrs_at(epoch);
        let train = trainer.train_epoch(&data.train)?;
        records.push(epoch_record(epoch, Split::Train, &train, lr, cfg.mode));
        let (acc, loss) = if data.val.is_empty() {
            (train.accuracy, train.loss)
        } else {
            let val = trainer.evaluate(&data.val)?.stats;
            records.push(epoch_record(epoch, Split::Val, &val, lr, cfg.mode));
            (val.accuracy, val.loss)
        };
        let better = best
            .as_ref()
            .is_none_or(|(a, l, _, _)| acc > *a || (acc == *a && loss < *l));
        if better {
            best = Some((acc, loss, epoch, trainer.model.clone()));
        }
    }
    let (val_accuracy, best_epoch) = match best {
        Some((acc, _, epoch, model)) => {
            trainer.model = model;
            (acc, epoch)
        }
        None => (f64::NAN, 0),
    };
    let checkpoint = out.join(CHECKPOINT_FILE);
    Checkpoint::from_model(&trainer.model, cfg.mode, cfg.to_toml()).save(&checkpoint)?;
    let test = trainer.evaluate(&data.test)?.stats;
    let (lr, _) = cfg.train.lrs_at(best_epoch);
    records.push(epoch_record(best_epoch, Split::Test, &test, lr, cfg.mode));
    write_records(&out.join(REPORT_FILE), &records)?;
    Ok(TrainOutcome {
        records,
        best_epoch,
        val_accuracy: if val_accuracy.is_finite() { val_accuracy } else { 0.0 },
        test,
        checkpoint,
    })
}

fn train_typed<S: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<TrainOutcome> {
    let data = load_data(cfg)?;
    let (backbone, pre) = build_backbone::<S>(cfg)?;
    train_from(cfg, &data, backbone, out, pre.into_iter().collect())
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.train.precision {
        Precision::F64 => train_typed::<f64>(cfg, out),
        Precision::F32 => train_typed::<f32>(cfg, out),
    }
}

fn eval_typed<S: Scalar>(ck: &Checkpoint, cfg: &ExperimentConfig, split: Split) -> Result<Record> {
    let data = load_data(cfg)?;
    let backbone = Backbone::<S>::init(&cfg.model.clone().with_prompts(0), cfg.train.seed)?;
    let mut model = MilModel::from_backbone(backbone, &cfg.head, cfg.task, cfg.mode, cfg.model.num_prompts, 0)?;
    ck.restore(&mut model)?;
    let bags = data.split(split);
    let mut trainer = Trainer::new(model, cfg.mode, cfg.train.clone())?;
    let stats = trainer.evaluate(bags)?.stats;
    Ok(epoch_record(0, split, &stats, 0.0, cfg.mode))
}

/// Evaluates a saved checkpoint on one split of the data its config names.
pub fn cmd_eval(checkpoint: &Path, split: Split) -> Result<Record> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = ExperimentConfig::parse(&ck.config)?;
    match cfg.train.precision {
        Precision::F64 => eval_typed::<f64>(&ck, &cfg, split),
        Precision::F32 => eval_typed::<f32>(&ck, &cfg, split),
    }
}

fn bench_typed<S: Scalar>(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<Vec<Record>> {
    // peak counts do not depend on the weights, so a random backbone will do
    let backbone = Backbone::<S>::init(&cfg.model.clone().with_prompts(0), cfg.train.seed)?;
    let mode = if cfg.mode == TrainMode::Conventional {
        TrainMode::Prompt
    } else {
        cfg.mode
    };
    let k = cfg.model.num_prompts.max(1);
    let model = MilModel::from_backbone(backbone, &cfg.head, cfg.task, mode, k, cfg.train.seed)?;
    let rows = bench_strategies(&model, sizes, cfg.train.instance_batch_size, &cfg.data)?;
    Ok(rows.iter().map(Record::from).collect())
}

/// Peak saved activations and time per bag for both strategies at each bag
/// size; written to `out/bench.jsonl`.
pub fn cmd_bench_mem(cfg: &ExperimentConfig, sizes: &[usize], out: &Path) -> Result<Vec<Record>> {
    cfg.validate()?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Config("bag sizes must be positive".into()));
    }
    let records = match cfg.train.precision {
        Precision::F64 => bench_typed::<f64>(cfg, sizes)?,
        Precision::F32 => bench_typed::<f32>(cfg, sizes)?,
    };
    ensure_dir(out)?;
    write_records(&out.join("bench.jsonl"), &records)?;
    Ok(records)
}

fn ablate_typed<S: Scalar>(cfg: &ExperimentConfig, ks: &[usize], out: &Path) -> Result<Vec<Record>> {
    let data = load_data(cfg)?;
    let fingerprint = format!("{:016x}", data.fingerprint());
    let (backbone, _) = build_backbone::<S>(cfg)?;
    let outcomes = cfg.train.exec.try_map_range(ks.len(), |i| {
        let mut run = cfg.clone();
        run.mode = TrainMode::Prompt;
        run.model.num_prompts = ks[i];
        train_from(
            &run,
            &data,
            backbone.clone(),
            &out.join(format!("k{}", ks[i])),
            Vec::new(),
        )
    })?;
    Ok(ks
        .iter()
        .zip(outcomes)
        .map(|(&k, o)| Record::Ablation {
            k,
            accuracy: o.test.accuracy,
            auroc: o.test.auroc,
            val_accuracy: o.val_accuracy,
            best_epoch: o.best_epoch,
            seed: cfg.train.seed,
            data_fingerprint: fingerprint.clone(),
        })
        .collect())
}

/// Trains one prompt model per `k` on shared data and backbone; each run
/// writes to `out/k<k>`, the table to `out/ablation.jsonl`.
pub fn cmd_ablate_k(cfg: &ExperimentConfig, ks: &[usize], out: &Path) -> Result<Vec<Record>> {
    cfg.validate()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("prompt counts must be at least 1".into()));
    }
    ensure_dir(out)?;
    let records = match cfg.train.precision {
        Precision::F64 => ablate_typed::<f64>(cfg, ks, out)?,
        Precision::F32 => ablate_typed::<f32>(cfg, ks, out)?,
    };
    write_records(&out.join("ablation.jsonl"), &records)?;
    Ok(records)
}
