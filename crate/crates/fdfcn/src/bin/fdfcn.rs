//! Operator entry point: train, segment, coords, audit, metrics, splits.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 audit/validation failure,
//! 5 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fdfcn::config::{
    check_keys, data_config_from_doc, network_config_from_doc, sampler_config_from_doc,
    train_config_from_doc, ConfigDoc, DataConfig,
};
use fdfcn::infer::{plan_tiles, segment_volume, MetricsReport, NetworkPredictor};
use fdfcn::net::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use fdfcn::net::{build, param_count, shape_audit, NetworkConfig};
use fdfcn::spectral::{solve_spectral_downsampled, BrainMask, SpectralCoordinates};
use fdfcn::train::{cv_splits, load_subject, train_on_subjects, SubjectData, TrainError};
use fdfcn::volume::{
    read_volume, remap_labels, write_nifti1, LabelRemap, Volume, VolumeData, VolumeError,
    VolumeHeader,
};

#[derive(Parser)]
#[command(
    name = "fdfcn",
    version,
    about = "3D fully dense FCN segmentation engine"
)]
struct Cli {
    /// Cap on worker threads for parallel kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one cross-validation fold and write checkpoints plus a log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a volume with a trained checkpoint.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Coordinate volume prefix written by `coords`; computed from the
        /// mask when absent.
        #[arg(long)]
        coords: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Eigensolve downsample factor when coordinates are computed here.
        #[arg(long, default_value_t = 1)]
        downsample: usize,
    },
    /// Compute spectral plus Cartesian coordinate volumes for a mask.
    Coords {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out_prefix: PathBuf,
        #[arg(long, default_value_t = 1)]
        downsample: usize,
    },
    /// Print the per-stage shape/channel table and parameter counts.
    Audit {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Dice/IoU table between a predicted and a reference label volume.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Remap table applied to the reference labels.
        #[arg(long)]
        remap: Option<PathBuf>,
    },
    /// Print the nine cross-validation folds for a subject list.
    Splits {
        #[arg(long)]
        subjects: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn io(message: impl std::fmt::Display) -> Self {
        CliError {
            code: 3,
            message: message.to_string(),
        }
    }

    fn validation(message: impl std::fmt::Display) -> Self {
        CliError {
            code: 4,
            message: message.to_string(),
        }
    }

    fn numeric(message: impl std::fmt::Display) -> Self {
        CliError {
            code: 5,
            message: message.to_string(),
        }
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        match e {
            VolumeError::Io(_) => CliError::io(e),
            _ => CliError::validation(e),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) => CliError::io(e),
            _ => CliError::validation(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::numeric(e),
            TrainError::Volume(VolumeError::Io(_)) => CliError::io(e),
            TrainError::Spectral(fdfcn::spectral::SpectralError::NoConvergence { .. }) => {
                CliError::numeric(e)
            }
            _ => CliError::validation(e),
        }
    }
}

fn read_config(path: &Path) -> Result<ConfigDoc, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io)?;
    let doc = ConfigDoc::parse(&text).map_err(CliError::validation)?;
    check_keys(&doc).map_err(CliError::validation)?;
    Ok(doc)
}

fn load_mask(path: &Path) -> Result<BrainMask, CliError> {
    let vol = read_volume(path)?;
    Ok(match &vol.data {
        VolumeData::U8(v) => BrainMask::from_nonzero(vol.header.dims, v),
        VolumeData::I16(v) => BrainMask::from_nonzero(vol.header.dims, v),
        VolumeData::F32(v) => {
            BrainMask::new(vol.header.dims, v.iter().map(|&x| x != 0.0).collect())
        }
    })
}

const COORD_SUFFIXES: [&str; 6] = [
    "spectral1",
    "spectral2",
    "spectral3",
    "cart_x",
    "cart_y",
    "cart_z",
];

fn coord_path(prefix: &Path, suffix: &str, ext: &str) -> PathBuf {
    let mut name = prefix
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(format!("_{suffix}.{ext}"));
    prefix.with_file_name(name)
}

fn write_coords(prefix: &Path, coords: &SpectralCoordinates) -> Result<(), CliError> {
    for (vol, suffix) in coords.volumes.iter().zip(COORD_SUFFIXES) {
        let out = Volume {
            header: VolumeHeader {
                dims: coords.dims,
                elem: fdfcn::volume::ElementType::F32,
                spacing: [1.0; 3],
            },
            data: VolumeData::F32(vol.clone()),
        };
        write_nifti1(&coord_path(prefix, suffix, "nii"), &out)?;
    }
    let mut report = String::new();
    for (i, (ev, res)) in coords
        .eigenvalues
        .iter()
        .zip(&coords.report.residuals)
        .enumerate()
    {
        report.push_str(&format!(
            "eigenvalue_{} = {ev:.12e}\tresidual = {res:.3e}\n",
            i + 1
        ));
    }
    report.push_str(&format!(
        "outer_iterations = {}\ncg_iterations = {}\ncomponent_voxels = {}\n",
        coords.report.outer_iterations,
        coords.report.cg_iterations,
        coords.component.len()
    ));
    fs::write(coord_path(prefix, "report", "txt"), report).map_err(CliError::io)
}

fn read_coords(prefix: &Path, dims: [usize; 3]) -> Result<SpectralCoordinates, CliError> {
    let mut volumes = Vec::with_capacity(6);
    for suffix in COORD_SUFFIXES {
        let vol = read_volume(&coord_path(prefix, suffix, "nii"))?;
        if vol.header.dims != dims {
            return Err(CliError::validation(format!(
                "coordinate volume {suffix} dims {:?} do not match image dims {dims:?}",
                vol.header.dims
            )));
        }
        match vol.data {
            VolumeData::F32(v) => volumes.push(v),
            _ => return Err(CliError::validation("coordinate volumes must be float32")),
        }
    }
    Ok(SpectralCoordinates {
        dims,
        volumes,
        eigenvalues: Vec::new(),
        component: Vec::new(),
        eigenvectors: Vec::new(),
        report: Default::default(),
    })
}

fn load_remap(path: Option<&Path>) -> Result<LabelRemap, CliError> {
    match path {
        None => Ok(LabelRemap::default_ibsr()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(CliError::io)?;
            Ok(LabelRemap::from_text(&text)?)
        }
    }
}

fn subjects_from(data: &DataConfig) -> Result<Vec<String>, CliError> {
    if !data.subjects.is_empty() {
        return Ok(data.subjects.clone());
    }
    if let Some(file) = &data.subjects_file {
        let text = fs::read_to_string(file).map_err(CliError::io)?;
        return Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect());
    }
    Err(CliError::validation(
        "config names no subjects (data.subjects or data.subjects_file)",
    ))
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Audit { config } => {
            let doc = match config {
                Some(path) => read_config(&path)?,
                None => ConfigDoc::default(),
            };
            let cfg = network_config_from_doc(&doc, "").map_err(CliError::validation)?;
            let table = shape_audit(&cfg).map_err(CliError::validation)?;
            println!("stage\tedge\tchannels");
            for stage in &table {
                println!("{}\t{}\t{}", stage.name, stage.edge, stage.channels);
            }
            let counts = param_count(&cfg);
            println!();
            println!("stage\tlearnable_parameters");
            for (name, count) in &counts.stages {
                println!("{name}\t{count}");
            }
            println!("total\t{}", counts.total);
            Ok(())
        }
        Command::Splits { subjects, seed } => {
            let text = fs::read_to_string(&subjects).map_err(CliError::io)?;
            let ids: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            let folds = cv_splits(&ids, seed).map_err(CliError::validation)?;
            println!("fold\ttrain\tval\ttest");
            for fold in folds {
                println!(
                    "{}\t{}\t{}\t{}",
                    fold.fold,
                    fold.train.join(","),
                    fold.val.join(","),
                    fold.test.join(",")
                );
            }
            Ok(())
        }
        Command::Coords {
            mask,
            out_prefix,
            downsample,
        } => {
            let mask = load_mask(&mask)?;
            let coords = solve_spectral_downsampled(&mask, 3, 1e-6, 200, downsample.max(1))
                .map_err(|e| match e {
                    fdfcn::spectral::SpectralError::NoConvergence { .. } => CliError::numeric(e),
                    _ => CliError::validation(e),
                })?;
            write_coords(&out_prefix, &coords)?;
            println!("eigenvalues: {:?}", coords.eigenvalues);
            Ok(())
        }
        Command::Metrics {
            pred,
            reference,
            remap,
        } => {
            let pred = read_volume(&pred)?.to_labels()?;
            let reference = read_volume(&reference)?.to_labels()?;
            let remap = load_remap(remap.as_deref())?;
            let reference = remap_labels(&reference, &remap)?;
            let report = MetricsReport::compute(&pred, &reference, fdfcn::volume::NUM_CLASSES)
                .map_err(CliError::validation)?;
            print!("{}", report.to_tsv());
            Ok(())
        }
        Command::Segment {
            checkpoint,
            image,
            mask,
            out,
            coords,
            batch,
            downsample,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let (net, _) = build::<f32>(&ckpt.config, ckpt.seed).map_err(CliError::validation)?;
            let image = read_volume(&image)?.to_intensity();
            let coords = match coords {
                Some(prefix) => read_coords(&prefix, image.dims)?,
                None => {
                    let mask = load_mask(&mask)?;
                    if mask.dims != image.dims {
                        return Err(CliError::validation(format!(
                            "mask dims {:?} do not match image dims {:?}",
                            mask.dims, image.dims
                        )));
                    }
                    solve_spectral_downsampled(&mask, 3, 1e-6, 200, downsample.max(1))
                        .map_err(CliError::numeric)?
                }
            };
            let cfg = &ckpt.config;
            let plan = plan_tiles(image.dims, cfg.input_edge, cfg.output_edge);
            let predictor = NetworkPredictor {
                net: &net,
                params: &ckpt.params,
            };
            let labels = segment_volume(&predictor, &image, &coords, &plan, batch)
                .map_err(CliError::validation)?;
            let vol = Volume {
                header: VolumeHeader {
                    dims: labels.dims,
                    elem: fdfcn::volume::ElementType::I16,
                    spacing: image.spacing,
                },
                data: VolumeData::I16(labels.data.iter().map(|&c| c as i16).collect()),
            };
            if out.extension().is_some_and(|e| e == "rv3") {
                fdfcn::volume::write_rv3(&out, &vol)?;
            } else {
                write_nifti1(&out, &vol)?;
            }
            Ok(())
        }
        Command::Train { config, fold, out } => {
            let doc = read_config(&config)?;
            let net_cfg: NetworkConfig =
                network_config_from_doc(&doc, "").map_err(CliError::validation)?;
            shape_audit(&net_cfg).map_err(CliError::validation)?;
            let train_cfg = train_config_from_doc(&doc).map_err(CliError::validation)?;
            let sampler_cfg = sampler_config_from_doc(&doc).map_err(CliError::validation)?;
            let data_cfg = data_config_from_doc(&doc).map_err(CliError::validation)?;
            let remap = load_remap(data_cfg.remap.as_deref())?;

            let (train_ids, val_ids) = if !data_cfg.split_train.is_empty() {
                (data_cfg.split_train.clone(), data_cfg.split_val.clone())
            } else {
                let subjects = subjects_from(&data_cfg)?;
                let fold = fold.ok_or_else(|| {
                    CliError::validation("--fold required when the config has no explicit split")
                })?;
                let folds = cv_splits(&subjects, train_cfg.seed).map_err(CliError::validation)?;
                let f = folds
                    .into_iter()
                    .nth(fold)
                    .ok_or_else(|| CliError::validation(format!("fold {fold} outside 0..9")))?;
                (f.train, f.val)
            };

            let load = |ids: &[String]| -> Result<Vec<SubjectData>, CliError> {
                ids.iter()
                    .map(|id| {
                        load_subject(&data_cfg.dir, id, &remap, data_cfg.coords_downsample.max(1))
                            .map_err(CliError::from)
                    })
                    .collect()
            };
            eprintln!(
                "loading {} training / {} validation subjects",
                train_ids.len(),
                val_ids.len()
            );
            let train_data = load(&train_ids)?;
            let val_data = load(&val_ids)?;
            let train_refs: Vec<&SubjectData> = train_data.iter().collect();
            let val_refs: Vec<&SubjectData> = val_data.iter().collect();

            fs::create_dir_all(&out).map_err(CliError::io)?;
            let outcome =
                train_on_subjects(&train_refs, &val_refs, &net_cfg, &train_cfg, &sampler_cfg)?;
            let mut log_text = String::new();
            for row in &outcome.log {
                log_text.push_str(&row.to_tsv());
                log_text.push('\n');
            }
            fs::write(out.join("train.log"), log_text).map_err(CliError::io)?;
            save_checkpoint(&out.join("best.ckpt"), &outcome.best)?;
            println!(
                "best epoch {} score {:.4} written to {}",
                outcome.best.epoch,
                outcome.best.score,
                out.join("best.ckpt").display()
            );
            Ok(())
        }
    }
}
