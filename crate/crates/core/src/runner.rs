//! Command implementations behind the CLI: dataset generation, training,
//! inference, evaluation, gradient checking and benchmarking, all driven by
//! one resolved [`RunConfig`].

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::attention::AttentionConfig;
use crate::bench::{bench_attention, render_bench_table, BenchReport};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::encoder::{encode, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, render_table, EvalReport, GroundTruth};
use crate::gradcheck::{corrupted_sum_of_squares, grad_check, DEFAULT_H};
use crate::heads::{
    assign_targets, classify, detection_loss, regress, Detection, HeadConfig, PyrGeom,
    SegmentAnnotation,
};
use crate::model::RaSeformer;
use crate::params::ParamStore;
use crate::synth::{
    build_dataset, load_clip_features, summarize, write_dataset, ClipRecord, DatasetManifest,
    Split,
};
use crate::tensor::Tensor;
use crate::train::{train_loop, AdamState, EpochLog, TrainClip};

pub const DATA_ROOT_ENV: &str = "RASEFORMER_DATA_ROOT";

/// Resolves the dataset directory from the flag or the environment.
pub fn resolve_data_dir(flag: Option<PathBuf>) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p),
        None => std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| {
                Error::Config(format!(
                    "no dataset directory: pass --data or set {DATA_ROOT_ENV}"
                ))
            }),
    }
}

fn ensure_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::NonEmptyOutputDir(out.to_path_buf()));
        }
    } else {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

fn echo_resolved_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let path = out.join("resolved_config.json");
    fs::write(&path, cfg.resolved_json()).map_err(|e| Error::io(&path, e))
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    ensure_out_dir(out, force)?;
    let (manifest, clips) = build_dataset(&cfg.data)?;
    write_dataset(out, &manifest, &clips)?;
    echo_resolved_config(cfg, out)?;
    let summary = summarize(&manifest);
    println!(
        "wrote {} clips ({} train / {} test, {} augmented) to {}",
        summary.total_clips,
        summary.train_clips,
        summary.test_clips,
        summary.augmented_clips,
        out.display()
    );
    println!("segments per class:");
    for (c, count) in summary.segments_per_class.iter().enumerate() {
        println!("  {:>2} {:<28} {count}", c, manifest.label_names[c]);
    }
    Ok(())
}

fn load_split_clips(
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
) -> Result<Vec<TrainClip>> {
    manifest
        .clips_in(split)
        .map(|c| {
            Ok(TrainClip {
                clip_id: c.clip_id.clone(),
                features: load_clip_features(root, c)?,
                annotations: c.annotations.clone(),
            })
        })
        .collect()
}

fn ground_truths(clips: &[&ClipRecord]) -> Vec<GroundTruth> {
    clips
        .iter()
        .flat_map(|c| {
            c.annotations.iter().map(|a| GroundTruth {
                clip_id: c.clip_id.clone(),
                label: a.label,
                start_s: a.start_s,
                end_s: a.end_s,
            })
        })
        .collect()
}

fn build_model(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<RaSeformer<f32>> {
    if manifest.label_names.len() != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "manifest has {} labels but model.num_classes is {}; set model.num_classes to match",
            manifest.label_names.len(),
            cfg.model.num_classes
        )));
    }
    RaSeformer::init(
        cfg.model.encoder_config(),
        cfg.model.head_config(),
        cfg.train.seed,
    )
}

/// Inference over a clip set with the full decode + Soft-NMS path; output
/// order follows the input clip order.
pub fn infer_clips(
    model: &RaSeformer<f32>,
    clips: &[TrainClip],
    manifest: &DatasetManifest,
    cfg: &RunConfig,
    threads: usize,
) -> Result<Vec<Detection>> {
    let delta = manifest.delta_base_s();
    let duration = manifest.clip_duration_s();
    let run = |clip: &TrainClip| -> Result<Vec<Detection>> {
        let mask = vec![true; clip.features.shape()[0]];
        model.infer_clip(&clip.clip_id, &clip.features, &mask, delta, duration, &cfg.nms)
    };
    let nested: Vec<Result<Vec<Detection>>> = if threads > 1 {
        clips.par_iter().map(run).collect()
    } else {
        clips.iter().map(run).collect()
    };
    let mut out = Vec::new();
    for dets in nested {
        out.extend(dets?);
    }
    Ok(out)
}

/// The metric the training loop logs: final mAP on the full test split.
fn test_split_map(
    model: &RaSeformer<f32>,
    manifest: &DatasetManifest,
    test_clips: &[TrainClip],
    cfg: &RunConfig,
    threads: usize,
) -> Result<Option<f64>> {
    let records: Vec<&ClipRecord> = manifest.clips_in(Split::Test).collect();
    let gts = ground_truths(&records);
    if gts.is_empty() {
        return Ok(None);
    }
    let preds = infer_clips(model, test_clips, manifest, cfg, threads)?;
    let normal = manifest.label_names.iter().position(|n| n == "Normal");
    let report = evaluate(&preds, &gts, &cfg.eval.thresholds, normal)?;
    Ok(Some(report.final_map))
}

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub logs: Vec<EpochLog>,
}

pub fn cmd_train(
    cfg: &RunConfig,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    allow_mismatch: bool,
    threads: usize,
) -> Result<TrainOutcome> {
    ensure_out_dir(out, true)?;
    let manifest = DatasetManifest::load(&data_dir.join("manifest.json"))?;
    manifest.validate(Some(data_dir))?;
    let mut model = build_model(cfg, &manifest)?;
    let mut adam = AdamState::new(&model.store);
    let mut start_epoch = 0usize;
    if let Some(ck_path) = resume {
        let ck = Checkpoint::load(ck_path)?;
        if ck.config_hash != cfg.config_hash() && !allow_mismatch {
            return Err(Error::ConfigHashMismatch);
        }
        ck.restore(&mut model.store, &mut adam)?;
        start_epoch = ck.epoch as usize;
    }

    let train_clips = load_split_clips(&manifest, data_dir, Split::Train)?;
    let test_clips = load_split_clips(&manifest, data_dir, Split::Test)?;
    let delta = manifest.delta_base_s();

    let logs = train_loop(
        &mut model,
        &mut adam,
        &train_clips,
        &cfg.train,
        delta,
        start_epoch,
        threads,
        |_, m| test_split_map(m, &manifest, &test_clips, cfg, threads),
    )?;

    let checkpoint_path = out.join("checkpoint.bin");
    Checkpoint::capture(
        &model.store,
        &adam,
        cfg.config_hash(),
        cfg.train.epochs as u64,
        cfg.train.seed,
    )
    .save(&checkpoint_path)?;

    let metrics_path = out.join("metrics.jsonl");
    let mut f = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    for log in &logs {
        let line = serde_json::to_string(log).map_err(|e| Error::json(&metrics_path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
    }
    echo_resolved_config(cfg, out)?;
    if let Some(last) = logs.last() {
        println!(
            "trained {} epochs: loss {:.4} (cls {:.4}, reg {:.4}){}",
            logs.len(),
            last.loss_total,
            last.loss_cls,
            last.loss_reg,
            last.map
                .map(|m| format!(", test mAP {m:.4}"))
                .unwrap_or_default()
        );
    }
    Ok(TrainOutcome {
        checkpoint_path,
        logs,
    })
}

fn load_checkpoint_into(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    ckpt: &Path,
    allow_mismatch: bool,
) -> Result<RaSeformer<f32>> {
    let mut model = build_model(cfg, manifest)?;
    let ck = Checkpoint::load(ckpt)?;
    if ck.config_hash != cfg.config_hash() && !allow_mismatch {
        return Err(Error::ConfigHashMismatch);
    }
    let mut adam = AdamState::new(&model.store);
    ck.restore(&mut model.store, &mut adam)?;
    Ok(model)
}

pub fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split '{other}'"))),
    }
}

pub fn cmd_infer(
    cfg: &RunConfig,
    data_dir: &Path,
    ckpt: &Path,
    out: &Path,
    split: Split,
    allow_mismatch: bool,
    threads: usize,
) -> Result<PathBuf> {
    ensure_out_dir(out, true)?;
    let manifest = DatasetManifest::load(&data_dir.join("manifest.json"))?;
    manifest.validate(Some(data_dir))?;
    let model = load_checkpoint_into(cfg, &manifest, ckpt, allow_mismatch)?;
    let clips = load_split_clips(&manifest, data_dir, split)?;
    let preds = infer_clips(&model, &clips, &manifest, cfg, threads)?;
    let path = out.join("preds.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for det in &preds {
        let line = serde_json::to_string(det).map_err(|e| Error::json(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    echo_resolved_config(cfg, out)?;
    println!("wrote {} detections to {}", preds.len(), path.display());
    Ok(path)
}

/// Parses and validates a predictions file against the manifest.
pub fn load_predictions(path: &Path, manifest: &DatasetManifest) -> Result<Vec<Detection>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let clip_ids: std::collections::HashSet<&str> =
        manifest.clips.iter().map(|c| c.clip_id.as_str()).collect();
    let duration = manifest.clip_duration_s();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let det: Detection = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: bad prediction: {e}", path.display(), i + 1))
        })?;
        if !clip_ids.contains(det.clip_id.as_str()) {
            return Err(Error::Data(format!(
                "{}:{}: unknown clip_id {}",
                path.display(),
                i + 1,
                det.clip_id
            )));
        }
        if det.label >= manifest.label_names.len()
            || det.start_s < 0.0
            || det.end_s <= det.start_s
            || det.end_s > duration + 1e-6
            || !(det.score > 0.0 && det.score <= 1.0)
        {
            return Err(Error::Data(format!(
                "{}:{}: prediction violates the format contract",
                path.display(),
                i + 1
            )));
        }
        out.push(det);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct SubsetReports {
    pub full: EvalReport,
    pub non_augmented: Option<EvalReport>,
    pub augmented: Option<EvalReport>,
}

/// Scores predictions against one split, reported for the full split and
/// the augmented / non-augmented subsets.
pub fn evaluate_split(
    preds: &[Detection],
    manifest: &DatasetManifest,
    split: Split,
    thresholds: &[f64],
) -> Result<SubsetReports> {
    let normal = manifest.label_names.iter().position(|n| n == "Normal");
    let subset = |keep: &dyn Fn(&ClipRecord) -> bool| -> Result<Option<EvalReport>> {
        let records: Vec<&ClipRecord> = manifest
            .clips_in(split)
            .filter(|c| keep(c))
            .collect();
        let gts = ground_truths(&records);
        if gts.is_empty() {
            return Ok(None);
        }
        let ids: std::collections::HashSet<&str> =
            records.iter().map(|c| c.clip_id.as_str()).collect();
        let sub_preds: Vec<Detection> = preds
            .iter()
            .filter(|p| ids.contains(p.clip_id.as_str()))
            .cloned()
            .collect();
        evaluate(&sub_preds, &gts, thresholds, normal).map(Some)
    };
    let full = subset(&|_| true)?.ok_or_else(|| {
        Error::Eval(format!("split has no ground truths to evaluate"))
    })?;
    let non_augmented = subset(&|c| !c.augmented)?;
    let augmented = subset(&|c| c.augmented)?;
    Ok(SubsetReports {
        full,
        non_augmented,
        augmented,
    })
}

pub fn cmd_eval(
    cfg: &RunConfig,
    data_dir: &Path,
    preds_path: &Path,
    out: &Path,
    split: Split,
) -> Result<SubsetReports> {
    ensure_out_dir(out, true)?;
    let manifest = DatasetManifest::load(&data_dir.join("manifest.json"))?;
    manifest.validate(Some(data_dir))?;
    let preds = load_predictions(preds_path, &manifest)?;
    let reports = evaluate_split(&preds, &manifest, split, &cfg.eval.thresholds)?;

    let mut text = String::new();
    for (name, report) in [
        ("full", Some(&reports.full)),
        ("non-augmented", reports.non_augmented.as_ref()),
        ("augmented", reports.augmented.as_ref()),
    ] {
        match report {
            Some(r) => {
                text.push_str(&format!(
                    "== {name} subset (final mAP {:.4}) ==\n",
                    r.final_map
                ));
                text.push_str(&render_table(r, &manifest.label_names));
                text.push('\n');
            }
            None => text.push_str(&format!("== {name} subset: no ground truths ==\n\n")),
        }
    }
    print!("{text}");

    let json_path = out.join("report.json");
    let json =
        serde_json::to_string_pretty(&reports).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let txt_path = out.join("report.txt");
    fs::write(&txt_path, &text).map_err(|e| Error::io(&txt_path, e))?;
    echo_resolved_config(cfg, out)?;
    Ok(reports)
}

/// One gradient-check component: name, worst relative error, tolerance.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckLine {
    pub component: String,
    pub worst_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Runs the finite-difference suite on desk-scale module instances (64-bit
/// mode). `corrupt` adds a deliberately broken fixture as a negative
/// control; the command must then fail.
pub fn cmd_gradcheck(cfg: &RunConfig, seed: u64, corrupt: bool) -> Result<Vec<GradCheckLine>> {
    use crate::encoder::{encoder_block, BlockParams, EncoderParams};
    

    let attention = AttentionConfig {
        d_model: 8,
        heads: 2,
        window: 5,
        keep_ratio: cfg.model.keep_ratio,
        variant: cfg.model.variant,
        qkv_conv_width: cfg.model.qkv_conv_width.min(3),
    };
    let enc_cfg = EncoderConfig {
        d_in: 6,
        d_model: 8,
        levels: 3,
        blocks_per_level: 1,
        stem_blocks: 1,
        ffn_expansion: 2,
        attention,
    };
    let head_cfg = HeadConfig {
        num_classes: 3,
        head_conv_layers: 1,
        regression_ranges: HeadConfig::default_ranges(3),
    };
    let delta = 0.25;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block_input = Tensor::<f64>::randn(&[10, 8], 1.0, &mut rng);
    let enc_input = Tensor::<f64>::randn(&[16, 6], 1.0, &mut rng);
    let weight_block = Tensor::<f64>::randn(&[10, 8], 1.0, &mut rng);
    let gts = vec![
        SegmentAnnotation {
            label: 1,
            start_s: 0.4,
            end_s: 1.6,
        },
        SegmentAnnotation {
            label: 2,
            start_s: 2.0,
            end_s: 3.2,
        },
    ];

    let mut lines = Vec::new();
    let record = |name: &str, worst: f64, tol: f64, lines: &mut Vec<GradCheckLine>| {
        let pass = worst <= tol;
        println!(
            "{:<22} worst rel err {:>10.3e} (tolerance {:.0e}) {}",
            name,
            worst,
            tol,
            if pass { "ok" } else { "FAIL" }
        );
        lines.push(GradCheckLine {
            component: name.to_string(),
            worst_rel_err: worst,
            tolerance: tol,
            pass,
        });
    };

    // attention block
    {
        let mut store = ParamStore::new();
        let block = BlockParams::init(&mut store, "blk", &enc_cfg, &mut rng);
        let mask = vec![true; 10];
        let report = grad_check(&store, DEFAULT_H, |g, b| {
            let x = g.constant(block_input.clone());
            let y = encoder_block(g, b, &block, x, &mask, &enc_cfg)?;
            let w = g.constant(weight_block.clone());
            let weighted = g.mul(y, w)?;
            Ok(g.sum(weighted))
        })?;
        record("attention-block", report.worst_rel_err, 1e-4, &mut lines);
    }
    // tiny encoder
    {
        let mut store = ParamStore::new();
        let params = EncoderParams::init(&mut store, &enc_cfg, &mut rng);
        let mask = vec![true; 16];
        let mut weights = Vec::new();
        for len in [16usize, 8, 4] {
            weights.push(Tensor::<f64>::randn(&[len, 8], 1.0, &mut rng));
        }
        let report = grad_check(&store, DEFAULT_H, |g, b| {
            let x = g.constant(enc_input.clone());
            let pyr = encode(g, b, &params, x, &mask, &enc_cfg)?;
            let mut total = None;
            for ((v, _, _), w) in pyr.levels.iter().zip(&weights) {
                let wc = g.constant(w.clone());
                let weighted = g.mul(*v, wc)?;
                let s = g.sum(weighted);
                total = Some(match total {
                    Some(t) => g.add(t, s)?,
                    None => s,
                });
            }
            Ok(total.expect("levels"))
        })?;
        record("encoder", report.worst_rel_err, 1e-4, &mut lines);
    }
    // heads and composite loss on a full tiny model
    {
        let model: RaSeformer<f64> = RaSeformer::init(enc_cfg.clone(), head_cfg.clone(), seed)?;
        let mask = vec![true; 16];
        let mut wc = Vec::new();
        let mut wr = Vec::new();
        for len in [16usize, 8, 4] {
            wc.push(Tensor::<f64>::randn(&[len, 3], 1.0, &mut rng));
            wr.push(Tensor::<f64>::randn(&[len, 2], 1.0, &mut rng));
        }
        let cls_report = grad_check(&model.store, DEFAULT_H, |g, b| {
            let x = g.constant(enc_input.clone());
            let pyr = encode(g, b, &model.encoder, x, &mask, &model.encoder_cfg)?;
            let logits = classify(g, b, &model.heads, &pyr)?;
            let mut total = None;
            for (l, w) in logits.iter().zip(&wc) {
                let w = g.constant(w.clone());
                let weighted = g.mul(*l, w)?;
                let s = g.sum(weighted);
                total = Some(match total {
                    Some(t) => g.add(t, s)?,
                    None => s,
                });
            }
            Ok(total.expect("levels"))
        })?;
        record(
            "classification-head",
            cls_report.worst_rel_err,
            1e-4,
            &mut lines,
        );
        let reg_report = grad_check(&model.store, DEFAULT_H, |g, b| {
            let x = g.constant(enc_input.clone());
            let pyr = encode(g, b, &model.encoder, x, &mask, &model.encoder_cfg)?;
            let offsets = regress(g, b, &model.heads, &pyr)?;
            let mut total = None;
            for (o, w) in offsets.iter().zip(&wr) {
                let w = g.constant(w.clone());
                let weighted = g.mul(*o, w)?;
                let s = g.sum(weighted);
                total = Some(match total {
                    Some(t) => g.add(t, s)?,
                    None => s,
                });
            }
            Ok(total.expect("levels"))
        })?;
        record(
            "regression-head",
            reg_report.worst_rel_err,
            1e-4,
            &mut lines,
        );
        let loss_report = grad_check(&model.store, DEFAULT_H, |g, b| {
            let x = g.constant(enc_input.clone());
            let pyr = encode(g, b, &model.encoder, x, &mask, &model.encoder_cfg)?;
            let logits = classify(g, b, &model.heads, &pyr)?;
            let offsets = regress(g, b, &model.heads, &pyr)?;
            let geom = PyrGeom::of_vars(&pyr);
            let targets = assign_targets(&gts, &geom, &model.head_cfg, delta)?;
            let loss = detection_loss(g, b, &model.heads, &logits, &offsets, &targets, &geom)?;
            Ok(loss.total)
        })?;
        record("detection-loss", loss_report.worst_rel_err, 1e-3, &mut lines);
    }
    if corrupt {
        let mut store = ParamStore::new();
        store.register("p", Tensor::<f64>::randn(&[4], 1.0, &mut rng), true);
        let report = grad_check(&store, DEFAULT_H, |g, b| {
            let p = b.var(store.id_by_name("p").unwrap());
            Ok(corrupted_sum_of_squares(g, p))
        })?;
        record("corrupted-fixture", report.worst_rel_err, 1e-5, &mut lines);
    }

    if let Some(fail) = lines.iter().find(|l| !l.pass) {
        return Err(Error::GradCheckFailed {
            context: fail.component.clone(),
            worst: fail.worst_rel_err,
            tolerance: fail.tolerance,
        });
    }
    Ok(lines)
}

pub fn cmd_bench(
    cfg: &RunConfig,
    lengths: &[usize],
    out: Option<&Path>,
) -> Result<BenchReport> {
    let attention = AttentionConfig {
        d_model: cfg.model.d_model,
        heads: cfg.model.heads,
        window: cfg.model.window,
        keep_ratio: cfg.model.keep_ratio,
        variant: cfg.model.variant,
        qkv_conv_width: cfg.model.qkv_conv_width,
    };
    let report = bench_attention(&attention, lengths, 10)?;
    print!("{}", render_bench_table(&report));
    if let Some(out) = out {
        ensure_out_dir(out, true)?;
        let path = out.join("bench.json");
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        echo_resolved_config(cfg, out)?;
    }
    Ok(report)
}
