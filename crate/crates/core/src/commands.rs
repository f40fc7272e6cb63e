//! High-level pipeline commands: data generation, agglomeration,
//! fine-tuning, evaluation, prediction, and the strategy ablation. The CLI
//! binary is a thin wrapper over these.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anchors::{build_anchor_tensor, AnchorTensor, HashTextEncoder, RatsAnchorSet};
use crate::config::{RunConfig, TeacherSpec};
use crate::datamodel::{build_block_targets, AnnotatedImage, BlockTargets, Dataset};
use crate::densityhead::extract_centroids;
use crate::encoders::{
    make_synthetic_teacher, pretrain_projector, AnchorBundle, Encoder, Projector, StudentModel,
    TeacherPool, ToyVit, VisionDecoder, VitConfig,
};
use crate::error::{CoreError, Result};
use crate::metrics::{grade_tps, mae, qwk, rmse, wmse, EvalRecord};
use crate::patchgroup::{full_resize_patch, Patch};
use crate::persist::{load_checkpoint, save_checkpoint, TensorFile, KIND_FINETUNED, KIND_STUDENT};
use crate::rats::{write_selection_log, Strategy};
use crate::render::{centroid_overlay, density_heatmap, save_image};
use crate::synthdata::generate_dataset;
use crate::train::{
    cache_student_features, evaluate_split, predict_image, run_agglomeration, run_finetune,
    run_finetune_unfrozen, AgglomerationParams, FinetuneEpochLoss, FinetuneParams,
};

/// Anchor context shared across the pipeline stages.
pub struct AnchorContext {
    pub anchors: AnchorTensor,
    pub rats: RatsAnchorSet,
    pub bundle: AnchorBundle,
}

pub fn build_anchor_context(cfg: &RunConfig) -> Result<AnchorContext> {
    let categories = cfg.categories()?;
    let binning = cfg.binning()?;
    let enc = HashTextEncoder::new(cfg.model.d_anchor);
    let anchors = build_anchor_tensor(&categories, binning, &enc)?;
    let rats = RatsAnchorSet::build(binning, cfg.model.temperature, &enc)?;
    let bundle = AnchorBundle {
        rats: rats.clone(),
        category: anchors.clone(),
    };
    Ok(AnchorContext {
        anchors,
        rats,
        bundle,
    })
}

/// Generates the synthetic dataset into `out_dir`; returns the annotation
/// file path.
pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    generate_dataset(&cfg.data.synth, cfg.data.images, out_dir)
}

fn annotation_path(data_dir: &Path) -> PathBuf {
    data_dir.join("annotations.json")
}

/// Annotated patches for projector pretraining, drawn from the head of the
/// training split.
fn pretrain_samples(
    cfg: &RunConfig,
    dataset: &Dataset,
    train: &[usize],
) -> Result<Vec<(Patch, BlockTargets)>> {
    let binning = cfg.binning()?;
    let m = cfg.categories()?.len();
    let p = cfg.model.vit.patch;
    let n = cfg.teachers.pretrain_images.min(train.len());
    let mut out = Vec::with_capacity(n);
    for &i in &train[..n] {
        let img = dataset.get(i)?;
        let patch = full_resize_patch(&img, cfg.model.m_side)?;
        let targets = build_block_targets(
            &crate::patchgroup::quantized_points(&patch),
            cfg.model.m_side,
            cfg.model.m_side,
            p,
            binning,
            m,
        )?;
        out.push((patch, targets));
    }
    Ok(out)
}

/// Resolves teacher specs into a frozen pool with anchor-space projectors.
pub fn build_teacher_pool(
    cfg: &RunConfig,
    ctx: &AnchorContext,
    dataset: &Dataset,
    train: &[usize],
) -> Result<TeacherPool> {
    let mut pool = TeacherPool::new();
    let patch = cfg.model.vit.patch;
    let m_side = cfg.model.m_side;
    let mut pretrain_data: Option<Vec<(Patch, BlockTargets)>> = None;

    for (i, spec) in cfg.teachers.specs.iter().enumerate() {
        let (name, teacher, mut projector, needs_pretrain): (
            String,
            Box<dyn Encoder>,
            Projector,
            bool,
        ) = match spec {
            TeacherSpec::Synthetic { sigma, seed } => {
                let t = make_synthetic_teacher(*sigma, *seed, &ctx.bundle, patch, m_side)?;
                let proj = t.paired_projector();
                (format!("synthetic(sigma={sigma})"), Box::new(t), proj, false)
            }
            TeacherSpec::RandomVit {
                seed,
                d_enc,
                blocks,
                heads,
                mlp_ratio,
            } => {
                let vcfg = VitConfig {
                    d_enc: *d_enc,
                    blocks: *blocks,
                    heads: *heads,
                    mlp_ratio: *mlp_ratio,
                    patch,
                    input_side: m_side,
                    layer_ids: vec![],
                };
                let mut vit = ToyVit::new(vcfg, *seed)?;
                vit.frozen = true;
                let proj = Projector::new(
                    &format!("teacher{i}_proj"),
                    *d_enc,
                    cfg.model.d_anchor,
                    seed ^ 0xBEEF,
                );
                (format!("random_vit(d={d_enc})"), Box::new(vit), proj, true)
            }
            TeacherSpec::External { path } => {
                let resolved = resolve_external(path);
                let tf = TensorFile::read(&resolved)?;
                let vcfg: VitConfig = tf
                    .meta
                    .get("vit_config")
                    .ok_or_else(|| {
                        CoreError::Checkpoint("external teacher missing vit_config".into())
                    })
                    .and_then(|s| {
                        serde_json::from_str(s)
                            .map_err(|e| CoreError::Checkpoint(format!("vit_config: {e}")))
                    })?;
                let mut vit = ToyVit::new(vcfg, 0)?;
                for p in vit.params_mut() {
                    let name = format!("teacher.{}", p.name);
                    let m = tf.get(&name).ok_or_else(|| {
                        CoreError::Checkpoint(format!("external teacher missing `{name}`"))
                    })?;
                    p.set(m.clone());
                }
                vit.frozen = true;
                let d_enc = vit.cfg.d_enc;
                let proj = Projector::new(
                    &format!("teacher{i}_proj"),
                    d_enc,
                    cfg.model.d_anchor,
                    0xE017 ^ i as u64,
                );
                (format!("external({path})"), Box::new(vit), proj, true)
            }
        };

        if needs_pretrain && cfg.teachers.pretrain_epochs > 0 {
            if pretrain_data.is_none() {
                pretrain_data = Some(pretrain_samples(cfg, dataset, train)?);
            }
            let data = pretrain_data.as_ref().unwrap();
            log::info!(
                "pretraining projector for teacher {i} ({name}) for {} epochs",
                cfg.teachers.pretrain_epochs
            );
            let (trained, losses) = pretrain_projector(
                teacher.as_ref(),
                projector,
                data,
                &ctx.anchors,
                &cfg.loss,
                cfg.model.temperature,
                cfg.teachers.pretrain_epochs,
                8,
                cfg.teachers.pretrain_lr,
            )?;
            log::info!("teacher {i} projector pretraining losses: {losses:?}");
            projector = trained;
        }
        pool.push(name, teacher, projector);
    }
    Ok(pool)
}

fn resolve_external(path: &str) -> PathBuf {
    let p = PathBuf::from(path);
    if p.is_absolute() || p.exists() {
        return p;
    }
    match std::env::var("COUNTLAB_CACHE") {
        Ok(cache) => PathBuf::from(cache).join(p),
        Err(_) => p,
    }
}

#[derive(Debug, Serialize)]
pub struct AgglomerateReport {
    pub epoch_losses: Vec<f64>,
    /// how often each teacher was selected (rats strategy only)
    pub selection_counts: Vec<usize>,
    pub batches_with_selection: usize,
    pub selection_log: Option<PathBuf>,
}

/// Trains the student on the training split and writes a checkpoint plus the
/// per-batch selection log.
pub fn cmd_agglomerate(
    cfg: &RunConfig,
    data_dir: &Path,
    out_ckpt: &Path,
) -> Result<AgglomerateReport> {
    cfg.validate()?;
    let dataset = Dataset::open(&annotation_path(data_dir))?;
    let train = cfg.train_indices(dataset.len());
    if train.is_empty() {
        return Err(CoreError::InvalidArgument("empty training split".into()));
    }
    let ctx = build_anchor_context(cfg)?;
    let pool = build_teacher_pool(cfg, &ctx, &dataset, &train)?;
    let mut student = StudentModel::new(cfg.vit_config(), cfg.model.d_anchor, cfg.run.seed)?;

    let k = cfg.model.ratios.len();
    let groups_per_batch = cfg.agglomerate.batch_size / k;
    let steps_per_epoch = train.len().div_ceil(groups_per_batch);
    let params = AgglomerationParams {
        m_side: cfg.model.m_side,
        ratios: cfg.model.ratios.clone(),
        batch_size: cfg.agglomerate.batch_size,
        epochs: cfg.agglomerate.epochs,
        schedule: cfg.agglomerate_schedule(steps_per_epoch),
        weight_decay: cfg.agglomerate.weight_decay,
        strategy: cfg.agglomerate.strategy,
        per_group_selection: cfg.agglomerate.per_group_selection,
        tdrop_keep: cfg.agglomerate.tdrop_keep,
        seed: cfg.run.seed,
    };
    let outcome = run_agglomeration(
        &mut student,
        &pool,
        &dataset,
        &train,
        &ctx.rats,
        &cfg.loss,
        &params,
    )?;

    let mut selection_counts = vec![0usize; pool.len()];
    for r in &outcome.records {
        selection_counts[r.selected_index] += 1;
    }
    let selection_log = if outcome.records.is_empty() {
        None
    } else {
        let log_path = out_ckpt.with_extension("selection.jsonl");
        write_selection_log(&outcome.records, &log_path)?;
        Some(log_path)
    };

    let rng_meta: BTreeMap<String, String> = [
        ("seed".to_string(), cfg.run.seed.to_string()),
        (
            "agglomerate_epochs".to_string(),
            cfg.agglomerate.epochs.to_string(),
        ),
    ]
    .into_iter()
    .collect();
    save_checkpoint(
        out_ckpt,
        KIND_STUDENT,
        &student,
        None,
        &cfg.to_toml()?,
        &rng_meta,
    )?;
    Ok(AgglomerateReport {
        epoch_losses: outcome.epoch_losses,
        selection_counts,
        batches_with_selection: outcome.records.len(),
        selection_log,
    })
}

#[derive(Debug, Serialize)]
pub struct FinetuneReport {
    pub epoch_losses: Vec<FinetuneEpochLoss>,
}

/// Fine-tunes the vision decoder on top of the (frozen) agglomerated student
/// and writes the combined checkpoint.
pub fn cmd_finetune(
    cfg: &RunConfig,
    student_ckpt: &Path,
    data_dir: &Path,
    out_ckpt: &Path,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    let loaded = load_checkpoint(student_ckpt)?;
    let mut student = loaded.student;
    let dataset = Dataset::open(&annotation_path(data_dir))?;
    let train = cfg.train_indices(dataset.len());
    if train.is_empty() {
        return Err(CoreError::InvalidArgument("empty training split".into()));
    }
    let ctx = build_anchor_context(cfg)?;
    let binning = cfg.binning()?;
    let m = cfg.categories()?.len();
    let mut decoder = VisionDecoder::new(cfg.model.d_anchor, cfg.run.seed ^ 0xDEC0);

    let steps_per_epoch = train.len().div_ceil(cfg.finetune.batch_size.max(1));
    let params = FinetuneParams {
        m_side: cfg.model.m_side,
        batch_size: cfg.finetune.batch_size,
        epochs: cfg.finetune.epochs,
        schedule: cfg.finetune_schedule(steps_per_epoch),
        seed: cfg.run.seed,
        temperature: cfg.model.temperature,
    };

    let history = if cfg.finetune.freeze_encoder {
        student.set_frozen(true);
        let encoder_before = student.param_bytes();
        let cache = cache_student_features(
            &student,
            &dataset,
            &train,
            cfg.model.m_side,
            binning,
            m,
        )?;
        let history = run_finetune(&mut decoder, &cache, &ctx.anchors, binning, &cfg.loss, &params)?;
        debug_assert_eq!(student.param_bytes(), encoder_before);
        history
    } else {
        log::warn!("finetune.freeze_encoder = false: training encoder end-to-end");
        student.set_frozen(false);
        let history = run_finetune_unfrozen(
            &mut student,
            &mut decoder,
            &dataset,
            &train,
            &ctx.anchors,
            binning,
            &cfg.loss,
            &params,
        )?;
        student.set_frozen(true);
        history
    };

    let rng_meta: BTreeMap<String, String> = [
        ("seed".to_string(), cfg.run.seed.to_string()),
        ("finetune_epochs".to_string(), cfg.finetune.epochs.to_string()),
    ]
    .into_iter()
    .collect();
    save_checkpoint(
        out_ckpt,
        KIND_FINETUNED,
        &student,
        Some(&decoder),
        &cfg.to_toml()?,
        &rng_meta,
    )?;
    Ok(FinetuneReport {
        epoch_losses: history,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    /// exactly {NM, NR, PM, PR, TM, WM}; TM is the TPS MAE in percent
    pub metrics: BTreeMap<String, f64>,
    pub per_image: Vec<EvalRecord>,
    pub degenerate_tps_ground_truth: usize,
    /// quadratic weighted kappa between predicted and ground-truth
    /// expression grades (None when undefined for the split)
    pub qwk_grades: Option<f64>,
}

/// Computes the metric suite from per-image records (2-category runs).
pub fn metrics_from_records(records: &[EvalRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(CoreError::InvalidArgument("no evaluation records".into()));
    }
    if records[0].predicted.len() != 2 {
        return Err(CoreError::InvalidArgument(
            "metric report expects exactly 2 categories (negative, positive)".into(),
        ));
    }
    let neg_p: Vec<f64> = records.iter().map(|r| r.predicted[0]).collect();
    let neg_g: Vec<f64> = records.iter().map(|r| r.ground_truth[0]).collect();
    let pos_p: Vec<f64> = records.iter().map(|r| r.predicted[1]).collect();
    let pos_g: Vec<f64> = records.iter().map(|r| r.ground_truth[1]).collect();

    let nm = mae(&neg_p, &neg_g)?;
    let nr = rmse(&neg_p, &neg_g)?;
    let pm = mae(&pos_p, &pos_g)?;
    let pr = rmse(&pos_p, &pos_g)?;

    let mut degenerate = 0usize;
    let mut tps_abs = 0.0;
    let mut pred_grades = Vec::with_capacity(records.len());
    let mut gt_grades = Vec::with_capacity(records.len());
    for r in records {
        let tp = r.predicted_tps();
        let tg = r.ground_truth_tps();
        if tg.degenerate {
            degenerate += 1;
        }
        tps_abs += (tp.value - tg.value).abs();
        pred_grades.push(grade_tps(tp.value));
        gt_grades.push(grade_tps(tg.value));
    }
    let tm = 100.0 * tps_abs / records.len() as f64;

    let wm = wmse(&[nr * nr, pr * pr], &[neg_g.iter().sum(), pos_g.iter().sum()])?;

    let qwk_grades = match qwk(&pred_grades, &gt_grades, 4) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("grade agreement undefined: {e}");
            None
        }
    };

    let metrics: BTreeMap<String, f64> = [
        ("NM".to_string(), nm),
        ("NR".to_string(), nr),
        ("PM".to_string(), pm),
        ("PR".to_string(), pr),
        ("TM".to_string(), tm),
        ("WM".to_string(), wm),
    ]
    .into_iter()
    .collect();
    Ok(EvalReport {
        metrics,
        per_image: records.to_vec(),
        degenerate_tps_ground_truth: degenerate,
        qwk_grades,
    })
}

/// Evaluates a fine-tuned checkpoint on the dataset's held-out split and
/// writes the JSON report plus the grade confusion matrix CSV.
pub fn cmd_evaluate(ckpt: &Path, data_dir: &Path, report_path: &Path) -> Result<EvalReport> {
    let loaded = load_checkpoint(ckpt)?;
    if loaded.kind != KIND_FINETUNED {
        return Err(CoreError::Checkpoint(format!(
            "evaluate needs a fine-tuned checkpoint, got kind `{}`",
            loaded.kind
        )));
    }
    let decoder = loaded
        .decoder
        .ok_or_else(|| CoreError::Checkpoint("checkpoint has no decoder".into()))?;
    let cfg = RunConfig::from_toml(&loaded.config_toml)?;
    let ctx = build_anchor_context(&cfg)?;
    let binning = cfg.binning()?;
    let dataset = Dataset::open(&annotation_path(data_dir))?;
    let holdout = cfg.holdout_indices(dataset.len());
    if holdout.is_empty() {
        return Err(CoreError::InvalidArgument("empty holdout split".into()));
    }
    let records = evaluate_split(
        &loaded.student,
        &decoder,
        &ctx.anchors,
        binning,
        cfg.model.temperature,
        cfg.loss.norm_floor,
        &dataset,
        &holdout,
        cfg.model.m_side,
    )?;
    let report = metrics_from_records(&records)?;
    write_report(&report, report_path)?;
    Ok(report)
}

pub fn write_report(report: &EvalReport, report_path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| CoreError::Other(format!("report encode: {e}")))?;
    std::fs::write(report_path, json)
        .map_err(|e| CoreError::io(report_path.display().to_string(), e))?;
    // grade confusion matrix as CSV next to the report
    let mut pred_grades = Vec::new();
    let mut gt_grades = Vec::new();
    for r in &report.per_image {
        pred_grades.push(grade_tps(r.predicted_tps().value));
        gt_grades.push(grade_tps(r.ground_truth_tps().value));
    }
    let conf = crate::metrics::confusion_matrix(&pred_grades, &gt_grades, 4);
    let mut csv = String::from("pred\\gt,grade0,grade1,grade2,grade3\n");
    for (i, row) in conf.iter().enumerate() {
        csv.push_str(&format!(
            "grade{i},{},{},{},{}\n",
            row[0], row[1], row[2], row[3]
        ));
    }
    let csv_path = report_path.with_extension("qwk.csv");
    std::fs::write(&csv_path, csv).map_err(|e| CoreError::io(csv_path.display().to_string(), e))
}

#[derive(Debug, Serialize)]
pub struct PredictOutputs {
    pub counts: BTreeMap<String, f64>,
    pub tps: f64,
    pub density_tensor: PathBuf,
    pub heatmaps: Vec<PathBuf>,
    pub overlay: PathBuf,
}

/// Runs a fine-tuned checkpoint on one image file; writes density tensors,
/// per-category heatmaps, a centroid overlay, and the counts JSON.
pub fn cmd_predict(ckpt: &Path, image_path: &Path, out_dir: &Path) -> Result<PredictOutputs> {
    let loaded = load_checkpoint(ckpt)?;
    if loaded.kind != KIND_FINETUNED {
        return Err(CoreError::Checkpoint(format!(
            "predict needs a fine-tuned checkpoint, got kind `{}`",
            loaded.kind
        )));
    }
    let decoder = loaded
        .decoder
        .ok_or_else(|| CoreError::Checkpoint("checkpoint has no decoder".into()))?;
    let cfg = RunConfig::from_toml(&loaded.config_toml)?;
    let ctx = build_anchor_context(&cfg)?;
    let binning = cfg.binning()?;
    let categories = cfg.categories()?;

    let img = load_raw_image(image_path)?;
    let mut patch = full_resize_patch(&img, cfg.model.m_side)?;
    patch.points = None; // arbitrary input: no count metadata
    let bundle = predict_image(
        &loaded.student,
        &decoder,
        &ctx.anchors,
        binning,
        cfg.model.temperature,
        cfg.loss.norm_floor,
        &patch,
    )?;

    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir.display().to_string(), e))?;
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "image".into());

    // density tensor container: one (h x w) matrix per category
    let mut tf = TensorFile::default();
    tf.meta.insert("layout".into(), "per-category h x w expected densities".into());
    tf.meta
        .insert("categories".into(), categories.names().join("|"));
    tf.meta.insert("n".into(), cfg.model.n.to_string());
    for (cat, d) in bundle.densities.iter().enumerate() {
        tf.push(
            format!("density.{cat}"),
            crate::tensor::Matrix::from_vec(bundle.h_blocks, bundle.w_blocks, d.clone()),
        );
    }
    let density_tensor = out_dir.join(format!("{stem}_density.bin"));
    tf.write(&density_tensor)?;

    let p = cfg.model.vit.patch;
    let mut heatmaps = Vec::new();
    let hues = [[0.2, 0.35, 1.0], [1.0, 0.25, 0.15]];
    for (cat, d) in bundle.densities.iter().enumerate() {
        let img_hm = density_heatmap(
            d,
            bundle.h_blocks,
            bundle.w_blocks,
            cfg.model.n as f64,
            p,
            hues[cat.min(1)],
        );
        let path = out_dir.join(format!("{stem}_heatmap_cat{cat}.png"));
        save_image(&img_hm, &path)?;
        heatmaps.push(path);
    }

    // centroid overlay on the resized input
    let resized = AnnotatedImage::new(
        img.id.clone(),
        cfg.model.m_side,
        cfg.model.m_side,
        patch.pixels.clone(),
        vec![],
    )?;
    let centroids: Vec<Vec<(usize, usize)>> = bundle
        .densities
        .iter()
        .map(|d| extract_centroids(d, bundle.h_blocks, bundle.w_blocks, 0.5, 1))
        .collect();
    let overlay_img = centroid_overlay(&resized, &centroids, p);
    let overlay = out_dir.join(format!("{stem}_overlay.png"));
    save_image(&overlay_img, &overlay)?;

    let totals = bundle.total_counts();
    let mut counts = BTreeMap::new();
    for (cat, total) in totals.iter().enumerate() {
        counts.insert(categories.name(cat).to_string(), *total);
    }
    let tps = if totals.len() == 2 {
        crate::metrics::tps(totals[1], totals[0]).value
    } else {
        0.0
    };
    let outputs = PredictOutputs {
        counts,
        tps,
        density_tensor,
        heatmaps,
        overlay,
    };
    let json = serde_json::to_string_pretty(&outputs)
        .map_err(|e| CoreError::Other(format!("predict encode: {e}")))?;
    let json_path = out_dir.join(format!("{stem}_counts.json"));
    std::fs::write(&json_path, json)
        .map_err(|e| CoreError::io(json_path.display().to_string(), e))?;
    Ok(outputs)
}

/// Loads an arbitrary RGB image file (no annotations).
pub fn load_raw_image(path: &Path) -> Result<AnnotatedImage> {
    let img = image::open(path)
        .map_err(|e| CoreError::Annotation(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f32> = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    AnnotatedImage::new(
        path.file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "image".into()),
        h,
        w,
        pixels,
        vec![],
    )
}

#[derive(Debug, Serialize)]
pub struct AblateRow {
    pub strategy: String,
    pub seed: u64,
    pub nm: f64,
    pub pm: f64,
    pub tm: f64,
    pub wm: f64,
}

#[derive(Debug, Serialize)]
pub struct AblateTable {
    pub rows: Vec<AblateRow>,
}

/// Runs agglomerate + finetune + evaluate once per strategy at identical
/// seeds and collects the comparison table.
pub fn cmd_ablate(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<AblateTable> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir.display().to_string(), e))?;
    let mut rows = Vec::new();
    for strategy in [Strategy::Rats, Strategy::Equal, Strategy::TDrop] {
        let mut scfg = cfg.clone();
        scfg.agglomerate.strategy = strategy;
        let student_ckpt = out_dir.join(format!("ablate_{strategy}_student.ckpt"));
        let tuned_ckpt = out_dir.join(format!("ablate_{strategy}_finetuned.ckpt"));
        let report_path = out_dir.join(format!("ablate_{strategy}_report.json"));
        cmd_agglomerate(&scfg, data_dir, &student_ckpt)?;
        cmd_finetune(&scfg, &student_ckpt, data_dir, &tuned_ckpt)?;
        let report = cmd_evaluate(&tuned_ckpt, data_dir, &report_path)?;
        rows.push(AblateRow {
            strategy: strategy.to_string(),
            seed: scfg.run.seed,
            nm: report.metrics["NM"],
            pm: report.metrics["PM"],
            tm: report.metrics["TM"],
            wm: report.metrics["WM"],
        });
    }
    let table = AblateTable { rows };
    let json = serde_json::to_string_pretty(&table)
        .map_err(|e| CoreError::Other(format!("ablate encode: {e}")))?;
    let path = out_dir.join("ablate_table.json");
    std::fs::write(&path, json).map_err(|e| CoreError::io(path.display().to_string(), e))?;

    if let (Some(rats), Some(equal)) = (
        table.rows.iter().find(|r| r.strategy == "rats"),
        table.rows.iter().find(|r| r.strategy == "equal"),
    ) {
        if rats.wm > equal.wm {
            log::warn!(
                "rats WM {:.4} exceeded equal-learning WM {:.4} on this run",
                rats.wm,
                equal.wm
            );
        }
    }
    Ok(table)
}
