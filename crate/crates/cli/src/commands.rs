use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use fbnet::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NetworkState, CONFIG_SNAPSHOT};
use fbnet::data::{generate_toy_dataset, to_rgb_image, write_toy_dataset, Dataset, SplitSpec, ToySpec};
use fbnet::eval::{evaluate, export_phase_grids};
use fbnet::geom3d::ViewPose;
use fbnet::pipeline::{distill_stage, load_dataset, new_student, new_teacher, pretrain_stage};
use fbnet::recognition::{Extractor, FeatureCache};
use fbnet::rng::{normal_vec, seeded_rng, DATA};
use fbnet::training::{
    build_augmenter_for_aug_mode, checkpoint_dir, load_params, run_phase, PhaseOptions, TrainState, STUDENT, TEACHER,
};
use fbnet::{AblationMode, Config, Error, Phase, Result};
use fbnet_autograd::Tensor;

use crate::{resolve_config, ConfigArgs};

const TEACHER_DIR: &str = "teacher";
const STUDENT_DIR: &str = "student";
const FEATURE_CACHE: &str = "teacher_features.safetensors";

pub fn make_toy(args: &ConfigArgs, out: &Path, force: bool) -> Result<()> {
    let cfg = resolve_config(args)?;
    let toy = generate_toy_dataset(&ToySpec::from_config(&cfg), &mut seeded_rng(cfg.seed, DATA))?;
    let manifest = write_toy_dataset(out, &toy, force)?;
    log::info!("wrote {} images to {}", toy.images.len(), manifest.display());
    Ok(())
}

fn teacher_from(ck: &Checkpoint, cfg: &Config) -> Result<Extractor> {
    let shape = new_teacher(cfg)?;
    Ok(Extractor { params: load_params(ck, TEACHER, &shape.params)?, ..shape })
}

pub fn pretrain(args: &ConfigArgs, data: &Path, models: &Path) -> Result<()> {
    let cfg = resolve_config(args)?;
    let (ds, split) = load_dataset(&cfg, data)?;
    let tdir = models.join(TEACHER_DIR);
    let cache_path = models.join(FEATURE_CACHE);
    if tdir.join(fbnet::checkpoint::MANIFEST).exists() && cache_path.exists() {
        let ck = load_checkpoint(&tdir, None)?;
        let cache = FeatureCache::load(&cache_path)?;
        if ck.config == cfg {
            let teacher = teacher_from(&ck, &cfg)?;
            if fbnet::checkpoint::param_digest(&teacher.params) == cache.teacher_digest {
                let (idx, _) = split.train_of(&split.base);
                if idx.iter().all(|&i| cache.contains(&ds.ids[i])) {
                    log::info!("teacher and feature cache in {} are current; reusing", models.display());
                    return Ok(());
                }
            }
        }
    }
    let (teacher, report, cache) = pretrain_stage(&cfg, &ds, &split)?;
    log::info!("teacher training accuracy after {} epochs: {:.4}", cfg.pretrain_epochs, report.train_accuracy);
    let mut ck = Checkpoint::new(Phase::Pretrain, cfg.pretrain_epochs as u64, cfg.clone());
    ck.networks.insert(TEACHER.into(), NetworkState::frozen(teacher.params.clone()));
    ck.info.insert("train_accuracy".into(), report.train_accuracy.to_string());
    save_checkpoint(&ck, &tdir)?;
    std::fs::create_dir_all(models).map_err(|e| Error::io(models, e))?;
    cache.save(&cache_path)?;
    log::info!("cached teacher features for {} images", cache.features.len());
    Ok(())
}

pub fn distill(args: &ConfigArgs, data: &Path, models: &Path) -> Result<()> {
    let cfg = resolve_config(args)?;
    let cache_path = models.join(FEATURE_CACHE);
    if !cache_path.exists() {
        return Err(Error::Data(format!(
            "teacher feature cache {} not found; run `fbnet pretrain --models {}` first",
            cache_path.display(),
            models.display()
        )));
    }
    let (ds, split) = load_dataset(&cfg, data)?;
    let cache = FeatureCache::load(&cache_path)?;
    let tck = load_checkpoint(&models.join(TEACHER_DIR), Some(&cfg))?;
    let teacher = teacher_from(&tck, &tck.config)?;
    if fbnet::checkpoint::param_digest(&teacher.params) != cache.teacher_digest {
        return Err(Error::Data("feature cache does not belong to the saved teacher; rerun `fbnet pretrain`".into()));
    }
    let (student, report) = distill_stage(&cfg, &ds, &split, &cache)?;
    log::info!("distillation loss {:.4} -> {:.4}", report.initial_loss, report.final_loss);
    let mut ck = Checkpoint::new(Phase::Distill, cfg.distill_iters as u64, cfg.clone());
    ck.networks.insert(TEACHER.into(), NetworkState::frozen(teacher.params));
    ck.networks.insert(STUDENT.into(), NetworkState::frozen(student.params));
    ck.info.insert("initial_loss".into(), report.initial_loss.to_string());
    ck.info.insert("final_loss".into(), report.final_loss.to_string());
    save_checkpoint(&ck, &models.join(STUDENT_DIR))
}

pub struct TrainArgs {
    pub models: Option<PathBuf>,
    pub phase: Phase,
    pub mode: Option<AblationMode>,
    pub run_dir: Option<PathBuf>,
    pub resume: bool,
    pub augmenter: Option<PathBuf>,
}

/// Latest checkpoint of `phase` under the run directory (the final one if
/// the phase completed).
fn latest_checkpoint(run_dir: &Path, phase: Phase) -> Option<PathBuf> {
    let final_dir = checkpoint_dir(run_dir, phase, None);
    if final_dir.join(fbnet::checkpoint::MANIFEST).exists() {
        return Some(final_dir);
    }
    let prefix = format!("{phase}_");
    std::fs::read_dir(run_dir.join("checkpoints"))
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let it: u64 = name.strip_prefix(&prefix)?.parse().ok()?;
            e.path().join(fbnet::checkpoint::MANIFEST).exists().then_some((it, e.path()))
        })
        .max_by_key(|(it, _)| *it)
        .map(|(_, p)| p)
}

fn fresh_run_dir(seed: u64) -> PathBuf {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    PathBuf::from("runs").join(format!("{ts}-seed{seed}"))
}

fn phase_iterations(cfg: &Config, phase: Phase) -> u64 {
    match phase {
        Phase::Novel => cfg.iters_novel as u64,
        _ => cfg.iters_base as u64,
    }
}

pub fn train(args: &ConfigArgs, data: &Path, t: TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(args)?;
    if let Some(m) = t.mode {
        cfg.ablation_mode = m;
    }
    let run_dir = match (&t.run_dir, t.phase, t.resume) {
        (Some(d), _, _) => d.clone(),
        (None, Phase::Base, false) => fresh_run_dir(cfg.seed),
        (None, _, _) => return Err(Error::config("run_dir", "--run-dir is required for the novel phase and for --resume")),
    };
    let (mut state, remaining) = if t.resume {
        let dir = latest_checkpoint(&run_dir, t.phase)
            .ok_or_else(|| Error::Data(format!("no {} checkpoint to resume in {}", t.phase, run_dir.display())))?;
        let ck = load_checkpoint(&dir, Some(&cfg))?;
        let st = TrainState::from_checkpoint(&ck)?;
        let total = phase_iterations(&st.config, t.phase);
        log::info!("resuming {} at iteration {} of {total}", t.phase, st.iteration);
        let remaining = total.saturating_sub(st.iteration);
        (st, remaining)
    } else {
        let st = match t.phase {
            Phase::Base => {
                if latest_checkpoint(&run_dir, Phase::Base).is_some() {
                    return Err(Error::Data(format!("{} already holds a base run; pass --resume or choose another --run-dir", run_dir.display())));
                }
                let models = t.models.as_ref().ok_or_else(|| Error::config("models", "--models is required for the base phase"))?;
                let sdir = models.join(STUDENT_DIR);
                if !sdir.join(fbnet::checkpoint::MANIFEST).exists() {
                    return Err(Error::Data(format!("no distilled student in {}; run `fbnet distill` first", sdir.display())));
                }
                let ck = load_checkpoint(&sdir, None)?;
                let teacher = teacher_from(&ck, &cfg)?;
                let shape = new_student(&cfg)?;
                let student = Extractor { params: load_params(&ck, STUDENT, &shape.params)?, ..shape };
                TrainState::new(cfg.clone(), teacher, student)?
            }
            _ => {
                let base = checkpoint_dir(&run_dir, Phase::Base, None);
                if !base.join(fbnet::checkpoint::MANIFEST).exists() {
                    return Err(Error::Data(format!(
                        "novel phase needs a completed base phase; {} not found",
                        base.display()
                    )));
                }
                let ck = load_checkpoint(&base, Some(&cfg))?;
                let st = TrainState::from_checkpoint(&ck)?;
                if t.mode.is_some_and(|m| m != st.mode) {
                    return Err(Error::config("ablation_mode", format!("run directory was trained in `{}` mode", st.mode)));
                }
                st
            }
        };
        let total = phase_iterations(&st.config, t.phase);
        (st, total)
    };
    if state.mode == AblationMode::AugOnly {
        let aug_run = t.augmenter.as_ref().ok_or_else(|| {
            Error::config("augmenter", "aug_only mode needs --augmenter <run dir of a completed view_only run>")
        })?;
        let ck = load_checkpoint(&checkpoint_dir(aug_run, t.phase, None), None)?;
        state.augmenter = Some(build_augmenter_for_aug_mode(&ck, t.phase)?);
    }
    let (ds, split) = load_dataset(&state.config, data)?;
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    state.config.save(&run_dir.join(CONFIG_SNAPSHOT))?;
    let interval = state.config.checkpoint_interval as u64;
    let reports = run_phase(
        &mut state,
        &ds,
        &split,
        t.phase,
        remaining,
        PhaseOptions { run_dir: Some(&run_dir), checkpoint_interval: interval },
    )?;
    if let Some(last) = reports.last() {
        log::info!("{} phase finished at iteration {}: {:?}", t.phase, state.iteration, last.record);
    }
    log::info!("run directory: {}", run_dir.display());
    Ok(())
}

fn load_run_state(run_dir: &Path, cfg: &Config) -> Result<TrainState> {
    let dir = [Phase::Novel, Phase::Base]
        .into_iter()
        .map(|p| checkpoint_dir(run_dir, p, None))
        .find(|d| d.join(fbnet::checkpoint::MANIFEST).exists())
        .ok_or_else(|| Error::Data(format!("no completed phase checkpoint in {}", run_dir.display())))?;
    TrainState::from_checkpoint(&load_checkpoint(&dir, Some(cfg))?)
}

pub fn eval(args: &ConfigArgs, data: &Path, run_dir: &Path, grid_poses: usize) -> Result<()> {
    let cfg = resolve_config(args)?;
    let state = load_run_state(run_dir, &cfg)?;
    let (ds, split) = load_dataset(&state.config, data)?;
    let report = evaluate(&state, &ds, &split)?;
    report.write(run_dir)?;
    let grids = export_phase_grids(&state, &ds, &split, &run_dir.join("grids"), grid_poses)?;
    log::info!(
        "accuracy base {:.4} novel {:.4}, FID {:.3}, IS {:.3} ± {:.3}; grids: {}",
        report.accuracy_base,
        report.accuracy_novel,
        report.fid,
        report.is_mean,
        report.is_std,
        grids.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
    );
    Ok(())
}

fn parse_poses(s: &str) -> Result<Vec<ViewPose>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let v: Vec<f64> = p
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::config("poses", format!("`{p}` is not three comma-separated numbers")))?;
            let arr: [f64; 3] = v.try_into().map_err(|_| Error::config("poses", format!("`{p}` needs exactly three angles")))?;
            ViewPose::from_array(arr)
        })
        .collect()
}

fn lookup(ds: &Dataset, ids: &str) -> Result<Vec<usize>> {
    ids.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|id| {
            let id = id.trim();
            ds.ids.iter().position(|x| x == id).ok_or_else(|| Error::Data(format!("unknown image id `{id}`")))
        })
        .collect()
}

pub fn synthesize(
    args: &ConfigArgs,
    data: &Path,
    checkpoint: &Path,
    poses: &str,
    condition: &str,
    style: Option<&str>,
    out: &Path,
) -> Result<()> {
    let cfg = resolve_config(args)?;
    let state = TrainState::from_checkpoint(&load_checkpoint(checkpoint, Some(&cfg))?)?;
    let (ds, _split): (Dataset, SplitSpec) = load_dataset(&state.config, data)?;
    let poses = parse_poses(poses)?;
    let cond = lookup(&ds, condition)?;
    let style_idx = match style {
        Some(s) => {
            let v = lookup(&ds, s)?;
            if v.len() != cond.len() {
                return Err(Error::config("style", "give exactly one style image per condition image"));
            }
            v
        }
        None => cond.clone(),
    };
    if poses.is_empty() || cond.is_empty() {
        return Err(Error::config("poses", "need at least one pose and one condition image"));
    }
    let nd = state.config.noise_dim;
    let f_id = state.student.features(&ds.low_batch(&cond))?;
    let f_style = state.student.features(&ds.low_batch(&style_idx))?;
    let noise = Tensor::new(&[cond.len(), nd], normal_vec(&mut seeded_rng(state.config.seed, "synth_noise"), cond.len() * nd));
    let concat = |f: &Tensor| {
        let fd = f.shape()[1];
        let mut z = Vec::with_capacity(cond.len() * (fd + nd));
        for i in 0..cond.len() {
            z.extend_from_slice(&f.data()[i * fd..(i + 1) * fd]);
            z.extend_from_slice(&noise.data()[i * nd..(i + 1) * nd]);
        }
        Tensor::new(&[cond.len(), fd + nd], z)
    };
    let (z_id, z_style) = (concat(&f_id), concat(&f_style));
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let g = state.view_generator();
    let r = state.config.image_resolution;
    let mut written = 0;
    for (j, pose) in poses.iter().enumerate() {
        let same = vec![*pose; cond.len()];
        let imgs = if style.is_some() { g.generate_dual(&z_id, &z_style, &same)? } else { g.generate(&z_id, &same)? };
        for i in 0..cond.len() {
            let path = out.join(format!("cond{i:02}_pose{j:02}.png"));
            to_rgb_image(&imgs.data()[i * 3 * r * r..(i + 1) * 3 * r * r], r)
                .save(&path)
                .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
            written += 1;
        }
    }
    log::info!("wrote {written} images to {}", out.display());
    Ok(())
}
