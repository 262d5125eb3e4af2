//! Acceptance criteria, one test each. Every criterion prints a single
//! `PASS`/`FAIL` line (with its runtime) straight to stdout, bypassing the
//! harness capture. Criteria hold a shared lock so runtimes are measured
//! one at a time. Run with `cargo test --release --test acceptance`.

mod common;

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use fbnet::checkpoint::{load_checkpoint, Checkpoint};
use fbnet::data::{generate_toy_dataset, Dataset, SplitSpec, ToySpec};
use fbnet::eval::{evaluate, export_phase_grids};
use fbnet::pipeline::{distill_stage, pretrain_stage, split_dataset, DistillReport};
use fbnet::recognition::Extractor;
use fbnet::rng::{seeded_rng, DATA};
use fbnet::training::{
    build_augmenter_for_aug_mode, checkpoint_dir, network_digests, run_phase, PhaseOptions, StepReport, TrainState, TRACE_FILE,
};
use fbnet::{AblationMode, Config, Phase};

use common::Check;

const SEEDS: [u64; 3] = [0, 1, 2];

static LOCK: Mutex<()> = Mutex::new(());

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

/// Runs one criterion under the lock and the runtime budget, prints its
/// verdict line and fails the test on `Err`, panic or overrun.
fn criterion(id: u32, title: &str, budget: Duration, body: impl FnOnce() -> Result<String, String>) {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let elapsed = start.elapsed();
    let outcome = match outcome {
        Ok(detail) if elapsed > budget => Err(format!("over budget ({:.1} s > {:.0} s); {detail}", elapsed.as_secs_f64(), budget.as_secs_f64())),
        o => o,
    };
    let (verdict, detail) = match &outcome {
        Ok(d) => ("PASS", d.as_str()),
        Err(d) => ("FAIL", d.as_str()),
    };
    say(&format!("criterion {id} [{title}]: {verdict} in {:.1} s: {detail}", elapsed.as_secs_f64()));
    if let Err(e) = outcome {
        panic!("criterion {id} failed: {e}");
    }
}

fn checks_outcome(checks: &[Check]) -> Result<String, String> {
    let bad: Vec<String> = checks.iter().filter(|c| !c.ok()).map(|c| format!("{} err {:.3e} > {:.0e}", c.name, c.err, c.tol)).collect();
    let worst = checks.iter().map(|c| c.err / c.tol).fold(0.0, f64::max);
    if bad.is_empty() {
        Ok(format!("{} checks, worst err/tol {worst:.3}", checks.len()))
    } else {
        Err(bad.join("; "))
    }
}

// ------------------------------------------------------------- fixtures

/// Toy data, pretrained teacher and distilled student for one seed.
struct Prepared {
    cfg: Config,
    ds: Dataset,
    split: SplitSpec,
    teacher: Extractor,
    student: Extractor,
    distill: DistillReport,
}

fn prepared(seed: u64) -> &'static Prepared {
    static CELLS: [OnceLock<Prepared>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    let i = SEEDS.iter().position(|&s| s == seed).expect("known seed");
    CELLS[i].get_or_init(|| {
        let cfg = Config { seed, ..Config::toy() };
        let toy = generate_toy_dataset(&ToySpec::from_config(&cfg), &mut seeded_rng(seed, DATA)).unwrap();
        let ds = Dataset::from_images(&toy.manifest, &toy.images, cfg.image_resolution, cfg.teacher_resolution()).unwrap();
        let split = split_dataset(&cfg, &ds).unwrap();
        let (teacher, _, cache) = pretrain_stage(&cfg, &ds, &split).unwrap();
        let (student, distill) = distill_stage(&cfg, &ds, &split, &cache).unwrap();
        Prepared { cfg, ds, split, teacher, student, distill }
    })
}

impl Prepared {
    fn state(&self, cfg: Config) -> TrainState {
        TrainState::new(cfg, self.teacher.clone(), self.student.clone()).unwrap()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ------------------------------------------------------------- criteria

#[test]
fn criterion_1_geometry_oracles() {
    criterion(1, "geometry oracles", Duration::from_secs(30), || {
        let mut checks = vec![
            Check::new("identity rotation, 3x8^3", common::identity_error(3, 8, 1), 1e-6),
            Check::new("identity rotation, 2x7^3", common::identity_error(2, 7, 2), 1e-6),
        ];
        for s in [3, 5, 7] {
            let bad = common::quarter_turn_mismatches(2, s, s as u64);
            checks.push(Check::new(format!("quarter turns on {s}^3 ({} mismatching)", bad.len()), bad.len() as f64, 0.0));
        }
        for (label, err) in common::round_trip_errors(57, 8.0, 3) {
            checks.push(Check::new(format!("round trip {label}"), err, 1e-2));
        }
        for (i, pose) in [[0.3, -0.7, 0.2], [-0.5, 1.9, 0.35], [0.1, 0.4, -1.2]].into_iter().enumerate() {
            checks.push(Check::new(format!("pose gradient at {pose:?}"), common::pose_gradient_error(13, pose, i as u64), 1e-3));
        }
        checks_outcome(&checks)
    });
}

#[test]
fn criterion_2_loss_oracles() {
    criterion(2, "loss formula oracles", Duration::from_secs(10), || {
        let checks: Vec<Check> = (0..3).flat_map(common::loss_checks).collect();
        checks_outcome(&checks)
    });
}

#[test]
fn criterion_3_prototype_oracle() {
    criterion(3, "prototypical classifier oracle", Duration::from_secs(5), || checks_outcome(&common::prototype_checks(3, 50)));
}

#[test]
fn criterion_4_metric_oracles() {
    criterion(4, "metric oracles", Duration::from_secs(60), || checks_outcome(&common::metric_checks(5)));
}

#[test]
fn criterion_5_update_routing() {
    criterion(5, "update routing at 16x16", Duration::from_secs(60), || {
        let bad: Vec<String> = SEEDS.iter().flat_map(|&s| common::routing_violations(s)).collect();
        if bad.is_empty() {
            Ok(format!("partition table holds bit-exactly for {} seeds", SEEDS.len()))
        } else {
            Err(bad.join("; "))
        }
    });
}

#[test]
fn criterion_6_distillation_trend() {
    criterion(6, "distillation trend", Duration::from_secs(300), || {
        let mut ratios = vec![];
        for seed in SEEDS {
            let p = prepared(seed);
            if p.cfg.base_categories != 8 || p.cfg.image_resolution != 32 || p.cfg.teacher_resolution() != 128 || p.cfg.distill_iters != 500 {
                return Err("fixture does not match the toy setting".into());
            }
            if !p.distill.final_loss.is_finite() {
                return Err(format!("seed {seed}: non-finite final loss"));
            }
            ratios.push(p.distill.final_loss / p.distill.initial_loss);
        }
        let avg = mean(&ratios);
        let detail = format!("final/initial per seed {ratios:.4?}, mean {avg:.4} (limit 0.5)");
        if avg <= 0.5 {
            Ok(detail)
        } else {
            Err(detail)
        }
    });
}

/// Checks every step report of a phase; returns the first violation.
fn check_reports(reports: &[StepReport], st: &TrainState, phase: Phase, n_categories: usize) -> Result<(), String> {
    let cfg = &st.config;
    let n = st.shots(phase);
    let real = n * n_categories;
    let want = match st.mode {
        AblationMode::Full | AblationMode::AugOnly => Some((1 + cfg.m_views) * real),
        AblationMode::RecOnly => Some(real),
        AblationMode::ViewOnly => None,
    };
    for r in reports {
        let it = r.record.iteration;
        for (name, v) in r.record.terms() {
            if !v.is_finite() {
                return Err(format!("{} {phase} iteration {it}: {name} = {v}", st.mode));
            }
        }
        if !r.record.l_total.is_finite() {
            return Err(format!("{} {phase} iteration {it}: non-finite total", st.mode));
        }
        if let Some((lo, hi)) = r.gen_range {
            if lo < -1.0 || hi > 1.0 {
                return Err(format!("{} {phase} iteration {it}: pixel range [{lo}, {hi}]", st.mode));
            }
        }
        if r.s_whole != want {
            return Err(format!("{} {phase} iteration {it}: |S_whole| {:?}, expected {want:?}", st.mode, r.s_whole));
        }
    }
    Ok(())
}

#[test]
fn criterion_7_end_to_end_smoke() {
    criterion(7, "end-to-end smoke", Duration::from_secs(30 * 60), || {
        let modes = [AblationMode::Full, AblationMode::RecOnly, AblationMode::ViewOnly, AblationMode::AugOnly];
        let mut acc: Vec<Vec<f64>> = vec![vec![]; modes.len()];
        for seed in SEEDS {
            let p = prepared(seed);
            if (p.split.base.len(), p.split.novel.len(), p.cfg.image_resolution) != (8, 4, 32) {
                return Err("fixture does not match the toy setting".into());
            }
            let mut view_ck: Option<(Checkpoint, Checkpoint)> = None;
            for (mi, &mode) in modes.iter().enumerate() {
                let cfg = Config { ablation_mode: mode, ..p.cfg.clone() };
                let mut st = p.state(cfg.clone());
                let mut phase_ck = None;
                for (phase, iters, cats) in [(Phase::Base, cfg.iters_base, 8), (Phase::Novel, cfg.iters_novel, 4)] {
                    if mode == AblationMode::AugOnly {
                        let (b, n) = view_ck.as_ref().expect("view_only runs first");
                        let ck = if phase == Phase::Base { b } else { n };
                        st.augmenter = Some(build_augmenter_for_aug_mode(ck, phase).map_err(|e| e.to_string())?);
                    }
                    let reports = run_phase(&mut st, &p.ds, &p.split, phase, iters as u64, PhaseOptions::default())
                        .map_err(|e| format!("seed {seed} {mode} {phase}: {e}"))?;
                    if reports.len() != iters {
                        return Err(format!("seed {seed} {mode} {phase}: {} iterations run", reports.len()));
                    }
                    check_reports(&reports, &st, phase, cats).map_err(|e| format!("seed {seed} {e}"))?;
                    if mode == AblationMode::ViewOnly {
                        match phase_ck.take() {
                            None => phase_ck = Some(st.to_checkpoint()),
                            Some(b) => view_ck = Some((b, st.to_checkpoint())),
                        }
                    }
                }
                let report = evaluate(&st, &p.ds, &p.split).map_err(|e| e.to_string())?;
                acc[mi].push(report.accuracy_novel);
            }
        }
        let means: Vec<f64> = acc.iter().map(|a| mean(a)).collect();
        let summary = modes.iter().zip(&means).map(|(m, a)| format!("{m} {a:.3}")).collect::<Vec<_>>().join(", ");
        let delta = means[0] - means[1];
        let detail = format!("novel 1-shot accuracy over {} seeds: {summary}; full - rec_only = {delta:+.3}", SEEDS.len());
        if means.iter().all(|&a| a > 0.25) {
            Ok(detail)
        } else {
            Err(format!("accuracy at or below chance 0.25: {detail}"))
        }
    });
}

#[test]
fn criterion_8_lambda_cat_sweep() {
    criterion(8, "lambda_cat sweep", Duration::from_secs(45 * 60), || {
        let p = prepared(SEEDS[0]);
        let root = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut end = vec![];
        for lambda_cat in [0.0, 1.0] {
            let cfg = Config { lambda_cat, ablation_mode: AblationMode::Full, ..p.cfg.clone() };
            let mut st = p.state(cfg.clone());
            let dir = root.path().join(format!("lambda_cat_{lambda_cat}"));
            let opts = PhaseOptions { run_dir: Some(&dir), checkpoint_interval: 0 };
            run_phase(&mut st, &p.ds, &p.split, Phase::Base, cfg.iters_base as u64, opts).map_err(|e| e.to_string())?;
            run_phase(&mut st, &p.ds, &p.split, Phase::Novel, cfg.iters_novel as u64, opts).map_err(|e| e.to_string())?;
            let report = evaluate(&st, &p.ds, &p.split).map_err(|e| e.to_string())?;
            report.write(&dir).map_err(|e| e.to_string())?;
            let grids = export_phase_grids(&st, &p.ds, &p.split, &dir.join("grids"), 6).map_err(|e| e.to_string())?;
            for f in grids.iter().chain([&dir.join("metrics.txt")]) {
                if !f.exists() {
                    return Err(format!("missing artifact {}", f.display()));
                }
            }
            if ![report.accuracy_base, report.accuracy_novel, report.fid, report.is_mean].iter().all(|v| v.is_finite()) {
                return Err(format!("non-finite metrics at lambda_cat {lambda_cat}"));
            }
            let tail: Vec<f64> = st.trace.iter().rev().take(10).map(|r| r.l_cat).collect();
            end.push(mean(&tail));
        }
        let detail = format!("L_cat over the last 10 iterations: lambda_cat=0 {:.4}, lambda_cat=1 {:.4}", end[0], end[1]);
        if end[1] < end[0] {
            Ok(detail)
        } else {
            Err(detail)
        }
    });
}

#[test]
fn criterion_9_determinism_and_resume() {
    criterion(9, "determinism and resume", Duration::from_secs(10 * 60), || {
        let p = prepared(SEEDS[0]);
        let cfg = Config { ablation_mode: AblationMode::Full, ..p.cfg.clone() };
        let root = tempfile::tempdir().map_err(|e| e.to_string())?;
        let err = |e: fbnet::Error| e.to_string();

        // straight run: 10 base + 6 novel, checkpoints every 7 base / 4 novel iterations
        let straight = |name: &str| -> Result<TrainState, String> {
            let dir = root.path().join(name);
            let mut st = p.state(cfg.clone());
            run_phase(&mut st, &p.ds, &p.split, Phase::Base, 10, PhaseOptions { run_dir: Some(&dir), checkpoint_interval: 7 }).map_err(err)?;
            run_phase(&mut st, &p.ds, &p.split, Phase::Novel, 6, PhaseOptions { run_dir: Some(&dir), checkpoint_interval: 4 }).map_err(err)?;
            Ok(st)
        };
        let a = straight("a")?;
        let b = straight("b")?;
        let read = |name: &str| std::fs::read(root.path().join(name).join(TRACE_FILE)).map_err(|e| e.to_string());
        if read("a")? != read("b")? || network_digests(&a) != network_digests(&b) {
            return Err("identical configs produced different runs".into());
        }

        // resume mid-base from iteration 7, then mid-novel from iteration 4
        let dir_a = root.path().join("a");
        let resumed = root.path().join("resumed");
        let ck = load_checkpoint(&checkpoint_dir(&dir_a, Phase::Base, Some(7)), Some(&cfg)).map_err(err)?;
        let mut r = TrainState::from_checkpoint(&ck).map_err(err)?;
        run_phase(&mut r, &p.ds, &p.split, Phase::Base, 3, PhaseOptions { run_dir: Some(&resumed), checkpoint_interval: 0 }).map_err(err)?;
        run_phase(&mut r, &p.ds, &p.split, Phase::Novel, 6, PhaseOptions { run_dir: Some(&resumed), checkpoint_interval: 0 }).map_err(err)?;
        if read("resumed")? != read("a")? || network_digests(&r) != network_digests(&a) {
            return Err("resuming at base iteration 7 diverged from the straight run".into());
        }
        let ck = load_checkpoint(&checkpoint_dir(&dir_a, Phase::Novel, Some(4)), Some(&cfg)).map_err(err)?;
        let mut r = TrainState::from_checkpoint(&ck).map_err(err)?;
        let resumed = root.path().join("resumed_novel");
        run_phase(&mut r, &p.ds, &p.split, Phase::Novel, 2, PhaseOptions { run_dir: Some(&resumed), checkpoint_interval: 0 }).map_err(err)?;
        if read("resumed_novel")? != read("a")? || network_digests(&r) != network_digests(&a) {
            return Err("resuming at novel iteration 4 diverged from the straight run".into());
        }
        Ok(format!("{} trace rows identical across 2 fresh runs and 2 resumes", a.trace.len()))
    });
}
