//! Run orchestration behind the `fairmi` binary: config loading, seeded
//! training sweeps with per-seed artifacts, checkpoint re-evaluation,
//! objective ablations, oracle verification and trade-off plots.
//!
//! Every artifact is deterministic for a fixed config: shuffles, init and
//! Gumbel draws are all seeded, result files embed no timestamps, and
//! per-seed work writes only under its own subdirectory.

pub mod oracle_cli;
pub mod plot;

use anyhow::{bail, Context, Result};
use fairmi::data::{
    self, encode, load_csv, DataSplits, DatasetSchema, EncodedDataset, SplitSpec,
};
use fairmi::metrics::{self, MetricsReport};
use fairmi::model::{
    load_checkpoint, save_checkpoint, ExtractorConfig, ModelBundle, ModelConfig,
};
use fairmi::train::{fit, EpochReport, FitOutcome, TrainConfig, Variant};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn default_hidden() -> Vec<usize> {
    vec![32]
}

fn default_embed() -> usize {
    32
}

/// One training run as declared in a JSON config file. CLI flags override
/// individual fields before the run starts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub schema: PathBuf,
    /// Sensitive attributes to debias jointly; empty means every attribute
    /// declared in the schema.
    #[serde(default)]
    pub sensitive: Vec<String>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default = "default_hidden")]
    pub extractor_hidden: Vec<usize>,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    /// Overrides the schema's include_sensitive_in_features flag when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub include_sensitive_features: Option<bool>,
    /// Result file of a vanilla run to measure reduction against; when
    /// absent and the variant is not vanilla, a vanilla reference is trained
    /// inline under `output_dir/vanilla_ref`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vanilla_reference: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        // Paths in the config are relative to the config file's directory.
        if let Some(base) = path.parent() {
            config.dataset = base.join(&config.dataset);
            config.schema = base.join(&config.schema);
            config.output_dir = base.join(&config.output_dir);
            if let Some(r) = &config.vanilla_reference {
                config.vanilla_reference = Some(base.join(r));
            }
        }
        Ok(config)
    }
}

/// Test metrics for one seed plus pointers to its artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub selected_epoch: usize,
    pub epochs_run: usize,
    pub test: MetricsReport,
    pub checkpoint: String,
    pub epoch_log: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub imparity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VanillaReference {
    pub imparity: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    /// Where the reference came from: a result-file path or "inline".
    pub source: String,
}

/// The structured result file written by a training run: config echo,
/// per-seed metrics, their seed-mean aggregate, and the vanilla reference
/// used for the reduction column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRecord {
    pub version: String,
    pub variant: Variant,
    pub config: RunConfig,
    pub split_hash: String,
    pub per_seed: Vec<SeedResult>,
    pub aggregate: AggregateMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vanilla_reference: Option<VanillaReference>,
}

impl ResultRecord {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading result file {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

struct PreparedData {
    schema: DatasetSchema,
    sensitive: Vec<String>,
    splits: DataSplits,
    model: ModelConfig,
}

fn prepare(config: &RunConfig) -> Result<PreparedData> {
    let mut schema = DatasetSchema::from_file(&config.schema)
        .with_context(|| format!("loading schema {}", config.schema.display()))?;
    if let Some(include) = config.include_sensitive_features {
        schema.include_sensitive_in_features = include;
    }
    let sensitive = if config.sensitive.is_empty() {
        schema.sensitive_names()
    } else {
        config.sensitive.clone()
    };
    let table = load_csv(&config.dataset, &schema)
        .with_context(|| format!("loading dataset {}", config.dataset.display()))?;
    let ds = encode(&table, &schema, &sensitive)?;
    let splits = data::split(&ds, &config.split)?;
    let model = ModelConfig {
        extractor: ExtractorConfig {
            input_dim: ds.feature_dim(),
            hidden: config.extractor_hidden.clone(),
            embed_dim: config.embed_dim,
        },
        class_count: ds.class_count(),
        group_card: ds.group_card(),
    };
    Ok(PreparedData {
        schema,
        sensitive,
        splits,
        model,
    })
}

fn test_metrics(
    bundle: &ModelBundle,
    test: &EncodedDataset,
    reference_imparity: Option<f64>,
) -> Result<MetricsReport> {
    let predictions = bundle.predict(test.features())?;
    let (micro_f1, macro_f1) =
        metrics::micro_macro_f1(&predictions, test.labels(), test.class_count())?;
    let acceptance_rates = metrics::acceptance_rates(
        &predictions,
        test.groups(),
        test.class_count(),
        test.group_card(),
    )?;
    let imparity = metrics::imparity_of_rates(&acceptance_rates);
    let reduction = reference_imparity
        .map(|r| metrics::reduction(r, imparity))
        .transpose()?;
    Ok(MetricsReport {
        micro_f1,
        macro_f1,
        imparity,
        reduction,
        reference_imparity,
        acceptance_rates,
    })
}

fn write_epoch_log(path: &Path, variant: Variant, reports: &[EpochReport]) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::from("epoch\tT");
    if variant.has_sensitive_term() {
        out.push_str("\tS");
    }
    if variant.has_ratio_term() {
        out.push_str("\tD");
    }
    out.push_str("\ttau\tval_imparity\tval_micro_f1\n");
    for r in reports {
        write!(&mut out, "{}\t{}", r.epoch, r.task_loss)?;
        if variant.has_sensitive_term() {
            write!(&mut out, "\t{}", r.sensitive_loss)?;
        }
        if variant.has_ratio_term() {
            write!(&mut out, "\t{}", r.ratio_loss)?;
        }
        writeln!(
            &mut out,
            "\t{}\t{}\t{}",
            r.temperature, r.val_imparity, r.val_micro_f1
        )?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn checkpoint_meta(config: &RunConfig, prepared: &PreparedData, seed: u64) -> serde_json::Value {
    serde_json::json!({
        "version": VERSION,
        "dataset": config.dataset,
        "schema": config.schema,
        "sensitive": prepared.sensitive,
        "sensitive_cards": prepared.splits.test.sensitive_cards(),
        "split": config.split,
        "include_sensitive_in_features": prepared.schema.include_sensitive_in_features,
        "variant": config.train.variant,
        "alpha": config.train.alpha,
        "seed": seed,
    })
}

fn resolve_vanilla_reference(config: &RunConfig) -> Result<Option<VanillaReference>> {
    if config.train.variant == Variant::Vanilla {
        return Ok(None);
    }
    if let Some(path) = &config.vanilla_reference {
        let record = ResultRecord::from_file(path)?;
        if record.variant != Variant::Vanilla {
            bail!(
                "vanilla reference {} was produced by variant '{}'",
                path.display(),
                record.variant
            );
        }
        return Ok(Some(VanillaReference {
            imparity: record.aggregate.imparity,
            micro_f1: record.aggregate.micro_f1,
            macro_f1: record.aggregate.macro_f1,
            source: path.display().to_string(),
        }));
    }
    // Train the reference inline with the same protocol and seeds.
    let mut vanilla_config = config.clone();
    vanilla_config.train.variant = Variant::Vanilla;
    vanilla_config.output_dir = config.output_dir.join("vanilla_ref");
    vanilla_config.vanilla_reference = None;
    let record = cmd_train(&vanilla_config)?;
    Ok(Some(VanillaReference {
        imparity: record.aggregate.imparity,
        micro_f1: record.aggregate.micro_f1,
        macro_f1: record.aggregate.macro_f1,
        source: "inline".into(),
    }))
}

/// Train every seed in the config, write per-seed artifacts and the result
/// file under `output_dir`, and return the record.
pub fn cmd_train(config: &RunConfig) -> Result<ResultRecord> {
    let prepared = prepare(config)?;
    config
        .train
        .validate(prepared.splits.train.class_count())
        .map_err(anyhow::Error::from)?;
    std::fs::create_dir_all(&config.output_dir)?;

    let vanilla_reference = resolve_vanilla_reference(config)?;
    let reference_imparity = vanilla_reference.as_ref().map(|v| v.imparity);

    // Seeds are independent runs over shared immutable data; run them on
    // worker threads, each writing only inside its own seed directory.
    let seeds = config.train.seeds.clone();
    let mut per_seed: Vec<Option<SeedResult>> = (0..seeds.len()).map(|_| None).collect();
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for (slot, &seed) in seeds.iter().enumerate() {
            let prepared = &prepared;
            let handle = scope.spawn(move || -> Result<(usize, SeedResult)> {
                let outcome: FitOutcome =
                    fit(&prepared.splits, &prepared.model, &config.train, seed)?;
                let seed_dir = config.output_dir.join(format!("seed_{seed}"));
                std::fs::create_dir_all(&seed_dir)?;

                let checkpoint_path = seed_dir.join("checkpoint.bin");
                save_checkpoint(
                    &outcome.bundle,
                    checkpoint_meta(config, prepared, seed),
                    &checkpoint_path,
                )?;
                let log_path = seed_dir.join("epochs.tsv");
                write_epoch_log(&log_path, config.train.variant, &outcome.reports)?;

                let test = test_metrics(&outcome.bundle, &prepared.splits.test, reference_imparity)?;
                Ok((
                    slot,
                    SeedResult {
                        seed,
                        selected_epoch: outcome.selected_epoch,
                        epochs_run: outcome.epochs_run,
                        test,
                        checkpoint: checkpoint_path.display().to_string(),
                        epoch_log: log_path.display().to_string(),
                    },
                ))
            });
            handles.push(handle);
        }
        for handle in handles {
            let (slot, result) = handle.join().expect("seed worker panicked")?;
            per_seed[slot] = Some(result);
        }
        Ok(())
    })?;
    let per_seed: Vec<SeedResult> = per_seed.into_iter().map(Option::unwrap).collect();

    let n = per_seed.len() as f64;
    let mean = |f: &dyn Fn(&SeedResult) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
    let aggregate = AggregateMetrics {
        micro_f1: mean(&|s| s.test.micro_f1),
        macro_f1: mean(&|s| s.test.macro_f1),
        imparity: mean(&|s| s.test.imparity),
        reduction: if per_seed.iter().all(|s| s.test.reduction.is_some()) {
            Some(mean(&|s| s.test.reduction.unwrap()))
        } else {
            None
        },
    };

    let record = ResultRecord {
        version: VERSION.into(),
        variant: config.train.variant,
        config: config.clone(),
        split_hash: format!("{:016x}", prepared.splits.assignment_hash()),
        per_seed,
        aggregate,
        vanilla_reference,
    };
    write_result(&record, &config.output_dir.join("result.json"))?;
    Ok(record)
}

pub fn write_result(record: &ResultRecord, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(record)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Re-evaluate a stored checkpoint on the test split, optionally restricted
/// to a subset of the sensitive attributes it was debiased for. No
/// retraining happens; subset evaluation projects each joint group index
/// onto the requested attributes.
pub fn cmd_evaluate(
    checkpoint: &Path,
    dataset: &Path,
    schema_path: &Path,
    sensitive_subset: &[String],
) -> Result<MetricsReport> {
    let (bundle, header) = load_checkpoint(checkpoint)?;
    let meta = &header.meta;
    let trained_sensitive: Vec<String> = serde_json::from_value(
        meta.get("sensitive")
            .cloned()
            .unwrap_or(serde_json::Value::Null),
    )
    .context("checkpoint is missing the trained sensitive attribute list")?;
    let split_spec: SplitSpec = serde_json::from_value(
        meta.get("split").cloned().unwrap_or(serde_json::Value::Null),
    )
    .context("checkpoint is missing the split spec")?;
    let include = meta
        .get("include_sensitive_in_features")
        .and_then(serde_json::Value::as_bool);

    let mut schema = DatasetSchema::from_file(schema_path)?;
    if let Some(include) = include {
        schema.include_sensitive_in_features = include;
    }
    let table = load_csv(dataset, &schema)?;
    let ds = encode(&table, &schema, &trained_sensitive)?;
    if ds.feature_dim() != header.model.extractor.input_dim {
        bail!(
            "dataset encodes to {} features but the checkpoint expects {}",
            ds.feature_dim(),
            header.model.extractor.input_dim
        );
    }
    let splits = data::split(&ds, &split_spec)?;
    let test = &splits.test;

    let predictions = bundle.predict(test.features())?;
    let (micro_f1, macro_f1) =
        metrics::micro_macro_f1(&predictions, test.labels(), test.class_count())?;

    let subset: Vec<String> = if sensitive_subset.is_empty() {
        trained_sensitive.clone()
    } else {
        sensitive_subset.to_vec()
    };
    let (groups, group_card) = if subset == trained_sensitive {
        (test.groups().to_vec(), test.group_card())
    } else {
        let (groups, cards) = test.project_groups(&subset)?;
        (groups, cards.iter().product())
    };
    let acceptance_rates =
        metrics::acceptance_rates(&predictions, &groups, test.class_count(), group_card)?;
    let imparity = metrics::imparity_of_rates(&acceptance_rates);
    Ok(MetricsReport {
        micro_f1,
        macro_f1,
        imparity,
        reduction: None,
        reference_imparity: None,
        acceptance_rates,
    })
}

/// Run the full objective and both single-term ablations with identical
/// protocol, seeds and vanilla reference; returns (tsd, ts, td).
pub fn cmd_ablate(config: &RunConfig) -> Result<[ResultRecord; 3]> {
    if config.train.variant == Variant::Vanilla {
        bail!("ablation compares fairness variants; pick a non-vanilla base config");
    }
    std::fs::create_dir_all(&config.output_dir)?;
    // One shared vanilla reference keeps the three runs comparable.
    let shared_reference = if config.vanilla_reference.is_some() {
        config.vanilla_reference.clone()
    } else {
        let mut vanilla_config = config.clone();
        vanilla_config.train.variant = Variant::Vanilla;
        vanilla_config.output_dir = config.output_dir.join("vanilla_ref");
        vanilla_config.vanilla_reference = None;
        cmd_train(&vanilla_config)?;
        Some(vanilla_config.output_dir.join("result.json"))
    };

    let mut records = Vec::with_capacity(3);
    for variant in [Variant::Tsd, Variant::Ts, Variant::Td] {
        let mut run = config.clone();
        run.train.variant = variant;
        run.output_dir = config.output_dir.join(variant.to_string());
        run.vanilla_reference = shared_reference.clone();
        records.push(cmd_train(&run)?);
    }
    Ok(records.try_into().map_err(|_| ()).expect("three variants"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write_toy_run(dir: &Path, n: usize) -> RunConfig {
        let schema = r#"{
            "features": [
                {"name": "x1", "kind": "continuous"},
                {"name": "x2", "kind": "continuous"}
            ],
            "label": "label",
            "label_values": ["neg", "pos"],
            "sensitive": [
                {"name": "grp", "categories": ["a", "b"]}
            ]
        }"#;
        std::fs::write(dir.join("schema.json"), schema).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut csv = String::from("x1,x2,grp,label\n");
        for _ in 0..n {
            let g = rng.gen_bool(0.5);
            let y = rng.gen_bool(if g { 0.75 } else { 0.35 });
            let mu = if y { 1.0 } else { -1.0 };
            csv.push_str(&format!(
                "{},{},{},{}\n",
                mu + rng.gen_range(-1.0..1.0),
                -mu + rng.gen_range(-1.0..1.0),
                if g { "a" } else { "b" },
                if y { "pos" } else { "neg" }
            ));
        }
        std::fs::write(dir.join("data.csv"), csv).unwrap();

        RunConfig {
            dataset: dir.join("data.csv"),
            schema: dir.join("schema.json"),
            sensitive: vec![],
            output_dir: dir.join("out"),
            train: TrainConfig {
                variant: Variant::Vanilla,
                epochs: 4,
                patience: 4,
                learning_rate: 1e-2,
                batch_size: 32,
                seeds: vec![0, 1],
                ..TrainConfig::default()
            },
            split: SplitSpec::default(),
            extractor_hidden: vec![8],
            embed_dim: 4,
            include_sensitive_features: None,
            vanilla_reference: None,
        }
    }

    #[test]
    fn train_smoke_produces_complete_result_file() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_toy_run(dir.path(), 120);
        let record = cmd_train(&config).unwrap();

        assert_eq!(record.per_seed.len(), 2);
        assert!(record.aggregate.micro_f1 > 0.0);
        assert!(record.aggregate.imparity >= 0.0);
        let on_disk = ResultRecord::from_file(&config.output_dir.join("result.json")).unwrap();
        assert_eq!(on_disk.split_hash, record.split_hash);
        for seed in &on_disk.per_seed {
            assert!(Path::new(&seed.checkpoint).exists());
            assert!(Path::new(&seed.epoch_log).exists());
        }
    }

    #[test]
    fn aggregate_equals_recomputed_means() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_toy_run(dir.path(), 120);
        let record = cmd_train(&config).unwrap();
        let n = record.per_seed.len() as f64;
        let mean_micro: f64 = record.per_seed.iter().map(|s| s.test.micro_f1).sum::<f64>() / n;
        let mean_imp: f64 = record.per_seed.iter().map(|s| s.test.imparity).sum::<f64>() / n;
        assert!((record.aggregate.micro_f1 - mean_micro).abs() < 1e-12);
        assert!((record.aggregate.imparity - mean_imp).abs() < 1e-12);
    }

    #[test]
    fn evaluate_reproduces_stored_test_metrics_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_toy_run(dir.path(), 120);
        let record = cmd_train(&config).unwrap();
        let stored = &record.per_seed[0];
        let report = cmd_evaluate(
            Path::new(&stored.checkpoint),
            &config.dataset,
            &config.schema,
            &[],
        )
        .unwrap();
        assert_eq!(report.micro_f1.to_bits(), stored.test.micro_f1.to_bits());
        assert_eq!(report.macro_f1.to_bits(), stored.test.macro_f1.to_bits());
        assert_eq!(report.imparity.to_bits(), stored.test.imparity.to_bits());
    }

    #[test]
    fn fairness_run_records_reduction_against_inline_reference() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = write_toy_run(dir.path(), 150);
        config.train.variant = Variant::Tsd;
        config.train.seeds = vec![0];
        let record = cmd_train(&config).unwrap();
        let reference = record.vanilla_reference.as_ref().unwrap();
        assert_eq!(reference.source, "inline");
        assert!(record.aggregate.reduction.is_some());
        // The inline reference record exists on disk too.
        assert!(config
            .output_dir
            .join("vanilla_ref")
            .join("result.json")
            .exists());
    }
}
