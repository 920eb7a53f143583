//! Command implementations behind the CLI: pretrain, adapt, profile, export.
//!
//! Every command reads one strict JSON config, writes its artifacts under
//! `out_dir` with names derived from `run_id`, and overwrites deterministically
//! on rerun. Exit-code mapping lives on [`DctError`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptation::{adapt_stream, evaluate, pretrain, AdaptMode};
use crate::analysis::{
    embed_csv, export_embeddings, export_rollout, metrics_csv, profile, profile_csv, rollout_csv,
    EmbedWhat, TokenGeometry,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{gen_synthetic_dataset, make_stream, CorruptionSpec, StreamBatch};
use crate::error::{DctError, DctResult};
use crate::graph::Graph;
use crate::model::{
    bind_frozen, model_forward, ConditionerSource, ForwardMode, ModelParams, TraceOptions,
};

/// Samples used by `profile` for its fixed evaluation subset.
const PROFILE_SUBSET: usize = 128;

fn ensure_out_dir(cfg: &RunConfig) -> DctResult<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(())
}

fn load_matching_checkpoint(cfg: &RunConfig, path: &Path) -> DctResult<ModelParams> {
    let params = load_checkpoint(path)?;
    if params.config != cfg.model {
        return Err(DctError::CheckpointMismatch {
            message: format!(
                "checkpoint model config {:?} does not match run config {:?}",
                params.config, cfg.model
            ),
        });
    }
    Ok(params)
}

pub struct PretrainOutcome {
    pub checkpoint: std::path::PathBuf,
    pub train_log: std::path::PathBuf,
    pub source_accuracy: f64,
}

/// Train the source model on the clean synthetic train split and persist it.
pub fn cmd_pretrain(cfg: &RunConfig) -> DctResult<PretrainOutcome> {
    ensure_out_dir(cfg)?;
    let (train, test) = gen_synthetic_dataset(
        cfg.data.classes,
        cfg.data.train_per_class,
        cfg.data.test_per_class,
        cfg.data.image_size,
        cfg.dataset_seed(),
    )?;
    let mut pcfg = cfg.pretrain.clone();
    pcfg.seed = Some(cfg.pretrain_seed());
    let (params, logs) = pretrain(&cfg.model, &train, &pcfg)?;
    let accuracy = evaluate(&params, &test.images, &test.labels, 64, ForwardMode::Baseline)?;

    let ckpt = cfg.out_path("source.ckpt");
    save_checkpoint(&params, &ckpt)?;
    let mut csv = String::from("epoch,mean_loss,train_accuracy\n");
    for l in &logs {
        csv.push_str(&format!("{},{},{}\n", l.epoch, l.mean_loss, l.train_accuracy));
    }
    let log_path = cfg.out_path("train.csv");
    fs::write(&log_path, csv)?;
    Ok(PretrainOutcome { checkpoint: ckpt, train_log: log_path, source_accuracy: accuracy })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub mode: String,
    pub corruption: String,
    pub severity: u8,
    pub protocol: String,
    pub final_accuracy: f64,
    pub skipped_batches: usize,
    pub config: RunConfig,
}

#[derive(Debug)]
pub struct AdaptOutcome {
    pub summary: RunSummary,
    pub metrics_path: std::path::PathBuf,
    pub summary_path: std::path::PathBuf,
    pub adapted_checkpoint: std::path::PathBuf,
}

fn build_stream(cfg: &RunConfig) -> DctResult<Vec<StreamBatch>> {
    let (_, test) = gen_synthetic_dataset(
        cfg.data.classes,
        cfg.data.train_per_class,
        cfg.data.test_per_class,
        cfg.data.image_size,
        cfg.dataset_seed(),
    )?;
    make_stream(&test, &cfg.corruption_spec()?, &cfg.stream_protocol())
}

/// Run the online adaptation protocol over the configured corrupted stream.
pub fn cmd_adapt(
    cfg: &RunConfig,
    checkpoint: &Path,
    mode_override: Option<AdaptMode>,
) -> DctResult<AdaptOutcome> {
    ensure_out_dir(cfg)?;
    let mut effective = cfg.clone();
    if let Some(mode) = mode_override {
        effective.adapt.mode = mode;
    }
    let mut params = load_matching_checkpoint(&effective, checkpoint)?;
    if effective.adapt.mode == AdaptMode::StaticConditioner
        && params.conditioner_source() == ConditionerSource::Generator
    {
        params = params.with_static_conditioners();
    }
    let stream = build_stream(&effective)?;
    let outcome = adapt_stream(&mut params, &stream, &effective.adapt)?;

    let metrics_path = effective.out_path("metrics.csv");
    fs::write(&metrics_path, metrics_csv(&outcome.rows))?;
    let adapted = effective.out_path("adapted.ckpt");
    save_checkpoint(&params, &adapted)?;
    let summary = RunSummary {
        run_id: effective.run_id.clone(),
        mode: effective.adapt.mode.name().into(),
        corruption: effective.stream.corruption.name().into(),
        severity: effective.stream.severity,
        protocol: effective.stream.protocol.name().into(),
        final_accuracy: outcome.final_accuracy,
        skipped_batches: outcome.skipped_batches,
        config: effective.clone(),
    };
    let summary_path = effective.out_path("summary.json");
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| DctError::Io { message: e.to_string() })?;
    fs::write(&summary_path, text)?;
    Ok(AdaptOutcome { summary, metrics_path, summary_path, adapted_checkpoint: adapted })
}

/// Forward mode an analysis command should use for a given adaptation mode.
fn analysis_forward_mode(mode: AdaptMode) -> ForwardMode {
    mode.forward_mode()
}

pub struct ProfileOutcome {
    pub profile_path: std::path::PathBuf,
    /// Head-averaged distance per layer, per requested severity.
    pub per_severity_layer_means: Vec<(u8, Vec<f64>)>,
}

/// Attention-distance profiles of the checkpointed model over the evaluation
/// subset at each requested severity.
pub fn cmd_profile(
    cfg: &RunConfig,
    checkpoint: &Path,
    severities: &[u8],
) -> DctResult<ProfileOutcome> {
    ensure_out_dir(cfg)?;
    if severities.is_empty() {
        return Err(DctError::Config { message: "no severities requested".into() });
    }
    let params = load_matching_checkpoint(cfg, checkpoint)?;
    let (_, test) = gen_synthetic_dataset(
        cfg.data.classes,
        cfg.data.train_per_class,
        cfg.data.test_per_class,
        cfg.data.image_size,
        cfg.dataset_seed(),
    )?;
    let subset = PROFILE_SUBSET.min(test.len());
    let side = cfg.model.image_size;
    let px = side * side;
    let fwd_mode = analysis_forward_mode(cfg.adapt.mode);
    let geom = TokenGeometry::new(cfg.model.grid_side(), cfg.model.patch_size);
    let mut results = Vec::new();
    let mut per_layer = Vec::new();
    for &severity in severities {
        let spec = CorruptionSpec::new(cfg.stream.corruption, severity)?;
        // corrupt the fixed subset with per-image seeds derived from the
        // stream seed, independent of the protocol ordering
        let mut samples = Vec::with_capacity(subset);
        for idx in 0..subset {
            let img = crate::tensor::Tensor::new(
                vec![side, side, 1],
                test.image(idx).to_vec(),
            )?;
            let corrupted = crate::data::corrupt(&img, &spec, cfg.stream_seed() ^ (idx as u64))?;
            samples.push(corrupted);
        }
        let mut records = Vec::with_capacity(subset);
        // batched forward keeps graph sizes moderate
        for chunk in samples.chunks(32) {
            let mut data = Vec::with_capacity(chunk.len() * px);
            for s in chunk {
                data.extend_from_slice(s.data());
            }
            let images =
                crate::tensor::Tensor::from_parts(vec![chunk.len(), side, side, 1], data);
            let mut g = Graph::new();
            let bound = bind_frozen(&mut g, &params);
            let trace = TraceOptions { attention: true, ..TraceOptions::none() };
            let fwd = model_forward(&mut g, &images, &bound, fwd_mode, trace)?;
            for t in fwd.traces {
                records.push(t.attention);
            }
        }
        let prof = profile(&records, &geom)?;
        per_layer.push((severity, prof.per_layer_mean.clone()));
        results.push((severity, prof));
    }
    let path = cfg.out_path("profile.csv");
    fs::write(&path, profile_csv(&results))?;
    Ok(ProfileOutcome { profile_path: path, per_severity_layer_means: per_layer })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportWhat {
    ClassTokens,
    Conditioners,
    Rollout,
}

impl std::str::FromStr for ExportWhat {
    type Err = DctError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "class_tokens" => Ok(ExportWhat::ClassTokens),
            "conditioners" => Ok(ExportWhat::Conditioners),
            "rollout" => Ok(ExportWhat::Rollout),
            other => Err(DctError::Config {
                message: format!(
                    "unknown export target {other:?}; expected class_tokens, conditioners, or rollout"
                ),
            }),
        }
    }
}

#[derive(Debug)]
pub struct ExportOutcome {
    pub path: std::path::PathBuf,
    pub rows: usize,
}

/// Export per-layer embeddings or rollout saliency over the configured stream.
pub fn cmd_export(cfg: &RunConfig, checkpoint: &Path, what: ExportWhat) -> DctResult<ExportOutcome> {
    ensure_out_dir(cfg)?;
    if what == ExportWhat::Conditioners
        && !matches!(cfg.adapt.mode, AdaptMode::Dct | AdaptMode::StaticConditioner)
    {
        return Err(DctError::InvalidMode {
            message: format!(
                "mode {} has no conditioners to export",
                cfg.adapt.mode.name()
            ),
        });
    }
    let mut params = load_matching_checkpoint(cfg, checkpoint)?;
    if cfg.adapt.mode == AdaptMode::StaticConditioner
        && params.conditioner_source() == ConditionerSource::Generator
    {
        params = params.with_static_conditioners();
    }
    let stream = build_stream(cfg)?;
    let fwd_mode = analysis_forward_mode(cfg.adapt.mode);
    match what {
        ExportWhat::ClassTokens | ExportWhat::Conditioners => {
            let target = if what == ExportWhat::ClassTokens {
                EmbedWhat::ClassTokens
            } else {
                EmbedWhat::Conditioners
            };
            let rows = export_embeddings(&params, &stream, target, fwd_mode)?;
            let path = cfg.out_path("embed.csv");
            fs::write(&path, embed_csv(&rows))?;
            Ok(ExportOutcome { path, rows: rows.len() })
        }
        ExportWhat::Rollout => {
            let rows = export_rollout(&params, &stream, fwd_mode)?;
            let path = cfg.out_path("rollout.csv");
            fs::write(&path, rollout_csv(&rows))?;
            Ok(ExportOutcome { path, rows: rows.len() })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn toy_config(dir: &Path) -> RunConfig {
        let json = format!(
            r#"{{
            "run_id": "cmd",
            "out_dir": "{}",
            "seed": 3,
            "model": {{"image_size": 8, "patch_size": 4, "embed_dim": 8, "num_heads": 2,
                      "depth": 1, "mlp_ratio": 2.0, "num_classes": 3}},
            "data": {{"classes": 3, "train_per_class": 8, "test_per_class": 4, "image_size": 8}},
            "stream": {{"protocol": "normal", "batch_size": 6, "corruption": "contrast", "severity": 2}},
            "pretrain": {{"epochs": 1, "lr": 0.05}}
        }}"#,
            dir.display()
        );
        RunConfig::from_json(&json).unwrap()
    }

    #[test]
    fn pretrain_then_adapt_produces_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let out = cmd_pretrain(&cfg).unwrap();
        assert!(out.checkpoint.exists());
        assert!(out.train_log.exists());
        let adapt = cmd_adapt(&cfg, &out.checkpoint, Some(AdaptMode::Dct)).unwrap();
        assert!(adapt.metrics_path.exists());
        assert!(adapt.summary_path.exists());
        assert!(adapt.adapted_checkpoint.exists());
        assert_eq!(adapt.summary.mode, "dct");
        // summary roundtrips through a strict parser
        let text = std::fs::read_to_string(&adapt.summary_path).unwrap();
        let parsed: RunSummary = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed.run_id, "cmd");
        assert_eq!(parsed.final_accuracy, adapt.summary.final_accuracy);
    }

    #[test]
    fn pretrain_is_deterministic_across_invocations() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let first = cmd_pretrain(&cfg).unwrap();
        let bytes1 = std::fs::read(&first.checkpoint).unwrap();
        let second = cmd_pretrain(&cfg).unwrap();
        let bytes2 = std::fs::read(&second.checkpoint).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn adapt_rejects_mismatched_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let out = cmd_pretrain(&cfg).unwrap();
        let mut other = cfg.clone();
        other.model.embed_dim = 16;
        other.data.classes = 3;
        // model mismatch surfaces as a checkpoint error (exit code 4)
        let err = cmd_adapt(&other, &out.checkpoint, None).unwrap_err();
        assert!(matches!(err, DctError::CheckpointMismatch { .. }));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn corrupted_checkpoint_is_reported_with_tensor_name() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let out = cmd_pretrain(&cfg).unwrap();
        let bytes = std::fs::read(&out.checkpoint).unwrap();
        std::fs::write(&out.checkpoint, &bytes[..bytes.len() - 40]).unwrap();
        let err = cmd_adapt(&cfg, &out.checkpoint, None).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        match err {
            DctError::TensorMismatch { name, .. } => assert!(!name.is_empty()),
            other => panic!("expected tensor mismatch, got {other:?}"),
        }
    }

    #[test]
    fn profile_emits_rows_per_severity_layer_head() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let out = cmd_pretrain(&cfg).unwrap();
        let prof = cmd_profile(&cfg, &out.checkpoint, &[0, 3, 5]).unwrap();
        let text = std::fs::read_to_string(&prof.profile_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        // header + severities * layers * heads
        assert_eq!(lines.len(), 1 + 3 * 1 * 2);
        assert_eq!(lines[0], "severity,layer,head,mean_distance");
        // severity-0 profile equals the clean profile of the same model: the
        // identity corruption must not perturb distances
        let prof2 = cmd_profile(&cfg, &out.checkpoint, &[0]).unwrap();
        let text2 = std::fs::read_to_string(&prof2.profile_path).unwrap();
        for (a, b) in text.lines().skip(1).take(2).zip(text2.lines().skip(1)) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn export_validates_mode_for_conditioners() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_config(dir.path());
        cfg.adapt.mode = AdaptMode::LnOnly;
        let out = cmd_pretrain(&cfg).unwrap();
        let err = cmd_export(&cfg, &out.checkpoint, ExportWhat::Conditioners).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn export_class_tokens_has_samples_times_layers_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let out = cmd_pretrain(&cfg).unwrap();
        let exp = cmd_export(&cfg, &out.checkpoint, ExportWhat::ClassTokens).unwrap();
        // 12 test samples x 1 layer
        assert_eq!(exp.rows, 12);
        let text = std::fs::read_to_string(&exp.path).unwrap();
        assert_eq!(text.lines().count(), 13);
    }

    #[test]
    fn export_rollout_rows_sum_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let out = cmd_pretrain(&cfg).unwrap();
        let exp = cmd_export(&cfg, &out.checkpoint, ExportWhat::Rollout).unwrap();
        let text = std::fs::read_to_string(&exp.path).unwrap();
        for line in text.lines().skip(1) {
            let cells: Vec<&str> = line.split(',').collect();
            let sum: f64 = cells[4..].iter().map(|c| c.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-6, "saliency sum {sum}");
        }
    }
}
