use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::{trace_to_text, StepReport, TrainState, GENERATOR, TRACE_FILE};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::{AblationMode, Phase};
use crate::data::{sample_episode, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::rng::DATA;
use crate::synthesis::{Generator, GeneratorArch};

#[derive(Clone, Copy, Debug, Default)]
pub struct PhaseOptions<'a> {
    /// Where `losses.tsv` and `checkpoints/` go; nothing is written without it.
    pub run_dir: Option<&'a Path>,
    /// Save every this many iterations (0 = only at the end).
    pub checkpoint_interval: u64,
}

/// `checkpoints/<phase>_<iteration>` or `checkpoints/<phase>_final`.
pub fn checkpoint_dir(run_dir: &Path, phase: Phase, iteration: Option<u64>) -> PathBuf {
    let name = match iteration {
        Some(i) => format!("{phase}_{i:06}"),
        None => format!("{phase}_final"),
    };
    run_dir.join("checkpoints").join(name)
}

fn append_row(path: &Path, row: &str) -> Result<()> {
    let mut f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{row}").map_err(|e| Error::io(path, e))
}

/// Runs `iterations` more training steps of `phase` on fresh episodes.
/// Entering the novel phase from a base-trained state resets the
/// iteration counter; the loss trace continues.
pub fn run_phase(
    state: &mut TrainState,
    ds: &Dataset,
    split: &SplitSpec,
    phase: Phase,
    iterations: u64,
    opts: PhaseOptions<'_>,
) -> Result<Vec<StepReport>> {
    match (state.phase, phase) {
        (a, b) if a == b => {}
        (Phase::Base, Phase::Novel) => {
            state.phase = Phase::Novel;
            state.iteration = 0;
        }
        (from, to) => return Err(Error::Data(format!("cannot run phase `{to}` from a state in phase `{from}`"))),
    }
    if !matches!(phase, Phase::Base | Phase::Novel) {
        return Err(Error::Data(format!("`{phase}` is not an episodic training phase")));
    }
    let trace_path = opts.run_dir.map(|d| d.join(TRACE_FILE));
    if let Some(p) = &trace_path {
        if let Some(d) = opts.run_dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        std::fs::write(p, trace_to_text(&state.trace)).map_err(|e| Error::io(p, e))?;
    }
    let n = state.shots(phase);
    let mut reports = Vec::with_capacity(iterations as usize);
    for _ in 0..iterations {
        let ep = sample_episode(split, phase, n, state.config.n_query, state.streams.get(DATA))?;
        let report = state.train_step(ds, &ep)?;
        if let Some(p) = &trace_path {
            append_row(p, &report.record.to_row())?;
        }
        if let Some(d) = opts.run_dir {
            if opts.checkpoint_interval > 0 && state.iteration % opts.checkpoint_interval == 0 {
                save_checkpoint(&state.to_checkpoint(), &checkpoint_dir(d, phase, Some(state.iteration)))?;
            }
        }
        log::debug!("{phase} iteration {}: {:?}", state.iteration, report.record);
        reports.push(report);
    }
    if let Some(d) = opts.run_dir {
        save_checkpoint(&state.to_checkpoint(), &checkpoint_dir(d, phase, None))?;
    }
    Ok(reports)
}

/// Frozen generator taken from a completed `view_only` run of `phase`.
pub fn build_augmenter_for_aug_mode(ck: &Checkpoint, phase: Phase) -> Result<Generator> {
    let mode = ck.info.get("mode").map(String::as_str).unwrap_or("");
    if mode != AblationMode::ViewOnly.as_str() {
        return Err(Error::Data(format!("augmenter checkpoint comes from a `{mode}` run, expected `view_only`")));
    }
    if ck.phase != phase {
        return Err(Error::Data(format!("augmenter checkpoint is from phase `{}`, expected `{phase}`", ck.phase)));
    }
    let cfg = &ck.config;
    let arch = GeneratorArch::new(cfg.image_resolution, cfg.latent_dim(), cfg.gen_channels)?;
    let mut scratch = crate::rng::seeded_rng(0, crate::rng::INIT);
    let shape = Generator::new(arch, &mut scratch);
    let params = super::load_params(ck, GENERATOR, &shape.params)?;
    Ok(Generator { params, ..shape })
}
