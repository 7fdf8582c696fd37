use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use hogrn::checkpoint::{manifest_path, Checkpoint};
use hogrn::evaluation::{evaluate_split, KnownFacts};
use hogrn::explain::{explain, path_records, to_dot, to_json};
use hogrn::kgdata::{degree_report, sparsify_subset, Dataset, Triple};
use hogrn::model::Model;
use hogrn::numcore::OpKind;
use hogrn::selfcheck::{run_selfcheck, SelfCheckOptions};
use hogrn::training::{fit, TrainConfig};

use crate::config::load_config;
use crate::{Command, ExportFormat, ReportFormat, Split};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EPOCH_LOG_FILE: &str = "epochs.log";

/// Marks failures that are the tool's fault rather than the caller's.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Internal(String);

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Internal>().is_some() {
        return 2;
    }
    match e.downcast_ref::<hogrn::Error>() {
        Some(hogrn::Error::Diverged { .. }) => 2,
        Some(hogrn::Error::Num(n)) if !matches!(n, hogrn::NumError::Argument(_)) => 2,
        _ => 1,
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Stats { data, format } => stats(&data.data_dir, format),
        Command::Sparsify {
            data,
            out_dir,
            keep,
            seed,
        } => sparsify(&data.data_dir, &out_dir, keep, seed),
        Command::Train {
            data,
            out_dir,
            seed,
            config,
            flags,
        } => {
            let mut cfg = match &config {
                Some(path) => load_config(path)?,
                None => TrainConfig::default(),
            };
            flags.apply(&mut cfg);
            cfg.seed = seed;
            train(&data.data_dir, &out_dir, &cfg)
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            directions,
            format,
            workers,
        } => {
            if workers != 1 {
                bail!("--workers {workers}: evaluation is single-threaded, only 1 is supported");
            }
            eval(&data.data_dir, &checkpoint, split, directions, format)
        }
        Command::Explain {
            data,
            checkpoint,
            head_entity,
            relation,
            tail_entity,
            k,
            max_len,
            format,
            output,
        } => {
            let names = [head_entity.as_str(), relation.as_str(), tail_entity.as_str()];
            let text = explain_triple(&data.data_dir, &checkpoint, names, k, max_len, format)?;
            match output {
                Some(path) => fs::write(&path, text)
                    .with_context(|| format!("cannot write {}", path.display()))?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Selfcheck { seed, inject_fault } => selfcheck(seed, inject_fault.as_deref()),
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        bail!("data directory {} does not exist", dir.display());
    }
    Ok(Dataset::load(dir)?)
}

fn stats(dir: &Path, format: ReportFormat) -> Result<()> {
    let data = load_dataset(dir)?;
    let report = degree_report(&data.store, &data.vocab);
    match format {
        ReportFormat::Table => println!("{report}"),
        ReportFormat::Kv => print!("{}", report.to_key_values()),
    }
    Ok(())
}

fn sparsify(dir: &Path, out_dir: &Path, keep: f64, seed: u64) -> Result<()> {
    let data = load_dataset(dir)?;
    let (store, report) = sparsify_subset(&data.store, &data.vocab, keep, seed)?;
    let out = Dataset {
        vocab: data.vocab,
        store,
    };
    out.save(out_dir)?;
    println!("original_train={}", report.original_train);
    println!("kept_train={}", report.kept_train);
    println!("entities_absent_from_train={}", report.entities_absent_from_train);
    println!("relations_absent_from_train={}", report.relations_absent_from_train);
    println!("valid_uncovered={}", report.valid_uncovered);
    println!("test_uncovered={}", report.test_uncovered);
    if report.entities_absent_from_train > 0 {
        log::warn!(
            "{} entities have no training triple left",
            report.entities_absent_from_train
        );
    }
    Ok(())
}

fn train(dir: &Path, out_dir: &Path, config: &TrainConfig) -> Result<()> {
    let data = load_dataset(dir)?;
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    let log_path = out_dir.join(EPOCH_LOG_FILE);
    let mut log_file = fs::File::create(&log_path)
        .with_context(|| format!("cannot create {}", log_path.display()))?;
    let mut write_error = None;
    let outcome = fit(&data, config, |record| {
        log::info!("{record}");
        if write_error.is_none() {
            write_error = writeln!(log_file, "{}", record.log_line()).err();
        }
    })?;
    if let Some(e) = write_error {
        return Err(anyhow!(e).context(format!("cannot write {}", log_path.display())));
    }
    let path = out_dir.join(CHECKPOINT_FILE);
    Checkpoint::from_outcome(&outcome, config, &data.vocab.fingerprint()).save(&path)?;
    println!("variant={}", config.variant);
    println!("epochs_run={}", outcome.epochs_run);
    println!("best_epoch={}", outcome.best_epoch);
    println!("best_valid_mrr={:.2}", outcome.best_valid_mrr * 100.0);
    println!("checkpoint={}", path.display());
    println!("manifest={}", manifest_path(&path).display());
    println!("epoch_log={}", log_path.display());
    Ok(())
}

/// Loads a checkpoint together with the dataset it was trained on.
fn load_model(dir: &Path, checkpoint: &Path) -> Result<(Dataset, Checkpoint, Model)> {
    let data = load_dataset(dir)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.check_vocabulary(&data.vocab.fingerprint())?;
    let model = ckpt.model()?;
    Ok((data, ckpt, model))
}

fn eval(
    dir: &Path,
    checkpoint: &Path,
    split: Split,
    directions: Option<hogrn::evaluation::Directions>,
    format: ReportFormat,
) -> Result<()> {
    let (data, ckpt, model) = load_model(dir, checkpoint)?;
    let graph = data.extended_graph()?;
    let (states, _) = model.encode(&graph)?;
    let known = KnownFacts::from_store(&data.store, data.vocab.num_relations());
    let triples = match split {
        Split::Valid => &data.store.valid,
        Split::Test => &data.store.test,
    };
    let directions = directions.unwrap_or(ckpt.manifest.train.eval_directions);
    let report = evaluate_split(&states, model.config.head, triples, &known, directions)?;
    match format {
        ReportFormat::Table => println!("{report}"),
        ReportFormat::Kv => print!("{}", report.to_key_values()),
    }
    Ok(())
}

fn explain_triple(
    dir: &Path,
    checkpoint: &Path,
    [head, relation, tail]: [&str; 3],
    k: usize,
    max_len: usize,
    format: ExportFormat,
) -> Result<String> {
    let (data, _, model) = load_model(dir, checkpoint)?;
    let query = Triple::new(
        data.vocab.entity_id(head)?,
        data.vocab.relation_id(relation)?,
        data.vocab.entity_id(tail)?,
    );
    let graph = data.extended_graph()?;
    let (_, record) = model.encode(&graph)?;
    let paths = explain(&graph, &record, query, k, max_len)?;
    Ok(match format {
        ExportFormat::Json => to_json(&path_records(&paths, &graph, &data.vocab))? + "\n",
        ExportFormat::Dot => to_dot(&paths, &graph, &data.vocab, query),
    })
}

fn selfcheck(seed: u64, inject_fault: Option<&str>) -> Result<()> {
    let inject_fault = match inject_fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::DIFFERENTIABLE.iter().map(|k| k.name()).collect();
            anyhow!("unknown op `{name}` (known: {})", known.join(", "))
        })?),
    };
    let report = run_selfcheck(&SelfCheckOptions { seed, inject_fault });
    println!("{report}");
    if !report.passed() {
        let names: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
        return Err(Internal(format!("self-check failed: {}", names.join(", "))).into());
    }
    Ok(())
}
