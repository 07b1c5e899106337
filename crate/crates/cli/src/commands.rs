use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use csvit_core::atlas::{reassign_minor_fragments, synth_atlas, AtlasLabeling};
use csvit_core::mesh::{build_icosphere, connected_components, one_ring, Mesh};
use csvit_core::metrics::Report;
use csvit_core::partitioner::{
    face_partition, partition_hemisphere_traced, validate, validate_face_partition, ValidationReport,
};
use csvit_core::planner::Planner;
use csvit_core::tokenizer::{build_index_table, build_mask, gather, IndexTable};
use csvit_core::CsvMap;
use csvit_nn::gradcheck::{grad_check_with_step, GradCheckResult, DEFAULT_STEP};
use csvit_nn::train::{cross_validate, FitLog};
use csvit_nn::{Checkpoint, CheckpointMeta, Dataset, ModelConfig, TrainConfig};

use crate::config::RunConfig;
use crate::{AtlasCmd, CliError, CliResult, Command, MeshCmd, EXIT_FAILURE, EXIT_OK};

/// Training output written by `train` and read by `report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub report: Report,
    #[serde(default)]
    pub fold_of: Vec<usize>,
    #[serde(default)]
    pub fits: Vec<FitSummary>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_auroc: Option<f64>,
    pub final_train_loss: f64,
}

impl From<&FitLog> for FitSummary {
    fn from(l: &FitLog) -> Self {
        FitSummary {
            epochs_run: l.epochs_run,
            best_epoch: l.best_epoch,
            best_val_auroc: l.best_val_auroc,
            final_train_loss: l.final_train_loss,
        }
    }
}

fn timed<T>(stage: &str, f: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
    let start = Instant::now();
    let out = f();
    info!(
        "stage={stage} duration_ms={} ok={}",
        start.elapsed().as_millis(),
        out.is_ok()
    );
    out
}

fn require_file(path: &Path) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} does not exist", path.display())))
    }
}

fn load_mesh(path: &Path) -> CliResult<Mesh> {
    require_file(path)?;
    Ok(Mesh::load(path)?)
}

fn load_atlas(path: &Path, mesh: Option<&Mesh>) -> CliResult<AtlasLabeling> {
    require_file(path)?;
    let atlas = AtlasLabeling::load(path)?;
    if let Some(m) = mesh {
        atlas.validate(m.num_vertices())?;
    }
    Ok(atlas)
}

fn load_map(path: &Path) -> CliResult<CsvMap> {
    require_file(path)?;
    Ok(CsvMap::load(path)?)
}

pub(crate) fn execute(command: Command, cfg: &RunConfig, config_given: bool) -> CliResult<i32> {
    match command {
        Command::Mesh(MeshCmd::Build { level, out }) => timed("mesh", || {
            let mesh = build_icosphere(level)?;
            mesh.save(&out)?;
            info!(
                "stage=mesh level={level} vertices={} faces={} out={}",
                mesh.num_vertices(),
                mesh.faces.len(),
                out.display()
            );
            Ok(EXIT_OK)
        }),
        Command::Atlas(AtlasCmd::Synth { mesh, rois, wall_frac, seed, out }) => timed("atlas_synth", || {
            if !(0.0..1.0).contains(&wall_frac) {
                return Err(CliError::Usage(format!("--wall-frac {wall_frac} outside [0, 1)")));
            }
            let mesh = load_mesh(&mesh)?;
            let atlas = synth_atlas(&mesh, rois, wall_frac, seed)?;
            atlas.save(&out)?;
            info!("stage=atlas_synth rois={rois} seed={seed} vertices={}", atlas.labels.len());
            Ok(EXIT_OK)
        }),
        Command::Atlas(AtlasCmd::Clean { mesh, atlas, threshold, out }) => timed("atlas_clean", || {
            let threshold = threshold.unwrap_or(cfg.fragment_threshold);
            if !(threshold > 0.0 && threshold < 1.0) {
                return Err(CliError::Usage(format!("--threshold {threshold} outside (0, 1)")));
            }
            let mesh = load_mesh(&mesh)?;
            let atlas = load_atlas(&atlas, Some(&mesh))?;
            let adj = one_ring(&mesh)?;
            let result = reassign_minor_fragments(&atlas, &adj, threshold)?;
            for w in &result.warnings {
                warn!(
                    "stage=atlas_clean roi={} fragment_size={} min_vertex={} reason={:?}",
                    w.roi, w.size, w.min_vertex, w.reason
                );
            }
            result.labeling.save(&out)?;
            info!(
                "stage=atlas_clean reassigned={} warnings={}",
                result.reassigned,
                result.warnings.len()
            );
            Ok(EXIT_OK)
        }),
        Command::Plan(a) => timed("plan", || {
            let atlas = load_atlas(&a.atlas, None)?;
            let plan = match &a.mesh {
                Some(mesh_path) => {
                    let mesh = load_mesh(mesh_path)?;
                    atlas.validate(mesh.num_vertices())?;
                    let adj = one_ring(&mesh)?;
                    let comps = atlas
                        .roi_members()
                        .into_iter()
                        .map(|(r, m)| (r, connected_components(&m, &adj).iter().map(Vec::len).collect()))
                        .collect();
                    Planner::with_components(comps, a.k_total, &cfg.partition.planner)?.plan()?
                }
                None => Planner::new(atlas.roi_sizes(), a.k_total, &cfg.partition.planner)?.plan()?,
            };
            if a.json {
                println!("{}", serde_json::to_string_pretty(&plan)?);
            } else {
                println!("bounds L={} H={} rank={}", plan.lower, plan.upper, plan.relaxation_rank);
                for (roi, k) in &plan.counts {
                    println!("roi {roi}: {k}");
                }
            }
            Ok(EXIT_OK)
        }),
        Command::Partition(a) => timed("partition", || {
            let mesh = load_mesh(&a.mesh)?;
            let atlas = load_atlas(&a.atlas, Some(&mesh))?;
            let mut pcfg = cfg.partition;
            pcfg.refine |= a.refine;
            let run = partition_hemisphere_traced(&mesh, &atlas, a.k_total, &pcfg)?;
            for t in &run.trail {
                info!("stage=partition note={t:?}");
            }
            run.map.save(&a.out)?;
            info!(
                "stage=partition k_total={} v_max={} lower={} upper={} rank={} seed={}",
                run.map.num_csvs(),
                run.map.v_max,
                run.map.plan.lower,
                run.map.plan.upper,
                run.map.plan.relaxation_rank,
                a.seed
            );
            if a.face_based {
                let faces = face_partition(&run.map, &mesh, &atlas);
                info!("stage=partition mode=face_based duplicated_vertices={}", faces.duplicated_vertices);
            }
            Ok(EXIT_OK)
        }),
        Command::Validate(a) => timed("validate", || {
            let mesh = load_mesh(&a.mesh)?;
            let atlas = load_atlas(&a.atlas, Some(&mesh))?;
            let map = load_map(&a.csvmap)?;
            if map.num_vertices() != mesh.num_vertices() {
                return Err(CliError::Failure(format!(
                    "csvmap covers {} vertices, mesh has {}",
                    map.num_vertices(),
                    mesh.num_vertices()
                )));
            }
            let report = if a.face_based {
                validate_face_partition(&face_partition(&map, &mesh, &atlas), &mesh, &atlas)
            } else {
                validate(&map, &mesh, &atlas)
            };
            print_validation(&report);
            if let Some(path) = &a.report {
                fs::write(path, serde_json::to_string_pretty(&report)?)?;
            }
            Ok(report.exit_code())
        }),
        Command::Tokenize(a) => timed("tokenize", || {
            let left = load_map(&a.csvmap_left)?;
            let right = load_map(&a.csvmap_right)?;
            let table = build_index_table(&left, &right)?;
            table.save(&a.out)?;
            info!("stage=tokenize tokens={} v_max={}", table.num_rows(), table.v_max());
            if let (Some(dir), Some(out)) = (&a.features, &a.batch_out) {
                let ds = Dataset::load(dir)?;
                let batch = gather(&ds.features, &table, &build_mask(&table))?;
                fs::write(out, batch.to_bytes()?)?;
                info!("stage=tokenize subjects={} channels={}", batch.batch_size(), batch.channels());
            }
            Ok(EXIT_OK)
        }),
        Command::SynthData(a) => timed("synth_data", || {
            require_file(&a.index)?;
            let table = IndexTable::load(&a.index)?;
            let mesh = load_mesh(&a.mesh)?;
            let mut spec = cfg.synth.clone();
            if let Some(n) = a.subjects {
                spec.subjects = n;
            }
            if let Some(n) = a.signal_csvs {
                spec.signal_csvs = n;
            }
            if let Some(e) = a.effect {
                spec.effect = e;
            }
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            let mut ds = csvit_nn::data::planted_signal(&table, 2 * mesh.num_vertices(), &spec)?;
            if a.shuffle_labels {
                ds.shuffle_labels(spec.seed ^ 0x5AFF1E);
            }
            ds.save(&a.out)?;
            info!(
                "stage=synth_data subjects={} positives={} signal_rows={:?} shuffled={}",
                ds.len(),
                ds.labels.iter().filter(|&&y| y == 1).count(),
                ds.signal_rows.as_deref().unwrap_or(&[]),
                a.shuffle_labels
            );
            Ok(EXIT_OK)
        }),
        Command::Train(a) => timed("train", || {
            require_file(&a.index)?;
            if !a.data.join("manifest.json").is_file() {
                return Err(CliError::Usage(format!("{} has no manifest.json", a.data.display())));
            }
            let table = IndexTable::load(&a.index)?;
            let ds = Dataset::load(&a.data)?;
            let batch = gather(&ds.features, &table, &build_mask(&table))?;
            let model = ModelConfig {
                channels: batch.channels(),
                num_tokens: batch.num_tokens(),
                v_max: batch.v_max(),
                ..cfg.model.clone()
            };
            let mut train = cfg.train.clone();
            if let Some(f) = a.folds {
                train.folds = f;
            }
            if let Some(s) = a.seed {
                train.seed = s;
            }
            let cv = cross_validate(&batch, &ds.labels, &model, &train)?;
            let out = TrainReport {
                report: cv.report.clone(),
                fold_of: cv.fold_of.clone(),
                fits: cv.logs.iter().map(FitSummary::from).collect(),
                model: Some(model.clone()),
                train: Some(train),
            };
            fs::write(&a.report, serde_json::to_string_pretty(&out)?)?;
            if let Some(dir) = &a.checkpoints {
                fs::create_dir_all(dir)?;
                for (fold, params, stats) in &cv.models {
                    let ck = Checkpoint {
                        meta: CheckpointMeta { model: model.clone(), stats: stats.clone() },
                        params: params.clone(),
                    };
                    ck.save(&dir.join(format!("fold{fold}.ckpt")))?;
                }
            }
            print!("{}", cv.report.table());
            info!(
                "stage=train folds={} skipped={} auroc_mean={:.4} auroc_std={:.4}",
                cv.report.folds.len(),
                cv.report.skipped_folds.len(),
                cv.report.auroc.mean,
                cv.report.auroc.std
            );
            if cv.report.folds.is_empty() {
                return Err(CliError::Failure("every fold was skipped".into()));
            }
            Ok(EXIT_OK)
        }),
        Command::Gradcheck(a) => timed("gradcheck", || {
            // The check targets small models; without a config file use the tiny one.
            let model = if config_given { cfg.model.clone() } else { ModelConfig::tiny() };
            let step = a.step.unwrap_or(DEFAULT_STEP);
            if !(step > 0.0) {
                return Err(CliError::Usage(format!("--step {step} must be positive")));
            }
            let result: GradCheckResult = grad_check_with_step(&model, a.seed, step)?;
            println!(
                "max_rel_error={:.3e} worst={} checked={} step={:e}",
                result.max_rel_error, result.worst, result.checked, result.step
            );
            if let Some(out) = &a.out {
                fs::write(out, serde_json::to_string_pretty(&result)?)?;
            }
            Ok(if result.max_rel_error < a.tolerance { EXIT_OK } else { EXIT_FAILURE })
        }),
        Command::Report(a) => {
            require_file(&a.report)?;
            let r: TrainReport = serde_json::from_slice(&fs::read(&a.report)?)?;
            print!("{}", r.report.table());
            if !r.report.skipped_folds.is_empty() {
                println!("skipped folds: {:?}", r.report.skipped_folds);
            }
            Ok(EXIT_OK)
        }
    }
}

fn print_validation(report: &ValidationReport) {
    for c in &report.checks {
        let mut line = format!("check={} passed={}", c.name, c.passed);
        if !c.passed {
            let shown: Vec<String> = c.offenders.iter().take(10).map(ToString::to_string).collect();
            line.push_str(&format!(" offenders=[{}]", shown.join(",")));
            if !c.detail.is_empty() {
                line.push_str(&format!(" detail={:?}", c.detail));
            }
        }
        println!("{line}");
    }
    println!(
        "csvs={} v_max={} duplicated_vertices={} face_based={}",
        report.num_csvs, report.v_max, report.duplicated_vertices, report.face_based
    );
    if !report.all_passed() {
        println!("failed={}", report.failures().join(","));
    }
}
