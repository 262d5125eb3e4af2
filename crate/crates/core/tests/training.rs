mod common;

use std::collections::BTreeMap;

use fbnet::data::{sample_episode, Dataset, Episode, SplitSpec};
use fbnet::rng::{seeded_rng, DATA};
use fbnet::training::{
    build_augmenter_for_aug_mode, checkpoint_dir, network_digests, run_phase, trace_from_text, LossRecord, PhaseOptions,
    TrainState, AUGMENTER, DISCRIMINATOR, EMBEDDING, GENERATOR, STUDENT, TEACHER, TRACE_FILE,
};
use fbnet::{AblationMode, Config, Error, Phase};

use common::{same_params, tiny_config, tiny_state, toy_data};

struct Fixture {
    ds: Dataset,
    split: SplitSpec,
    st: TrainState,
}

fn fixture(cfg: Config) -> Fixture {
    let (ds, split) = toy_data(&cfg);
    let mut st = tiny_state(&cfg);
    if cfg.ablation_mode == AblationMode::AugOnly {
        let mut aug = st.generator.clone();
        aug.params.iter_mut().for_each(|(_, t)| *t = t.map(|v| v * 0.9));
        st.augmenter = Some(aug);
    }
    Fixture { ds, split, st }
}

fn episode(f: &Fixture, seed: u64) -> Episode {
    sample_episode(&f.split, Phase::Base, f.st.config.n_support_base, f.st.config.n_query, &mut seeded_rng(seed, DATA)).unwrap()
}

/// Names of the networks whose parameters differ between two digests.
fn changed(before: &BTreeMap<&'static str, String>, after: &BTreeMap<&'static str, String>) -> Vec<&'static str> {
    before.iter().filter(|(k, v)| after.get(*k) != Some(v)).map(|(k, _)| *k).collect()
}

#[test]
fn each_mode_updates_only_its_networks() {
    let expect: [(AblationMode, &[&str]); 4] = [
        (AblationMode::Full, &[DISCRIMINATOR, EMBEDDING, GENERATOR]),
        (AblationMode::RecOnly, &[EMBEDDING]),
        (AblationMode::ViewOnly, &[DISCRIMINATOR, GENERATOR]),
        (AblationMode::AugOnly, &[EMBEDDING]),
    ];
    for (mode, want) in expect {
        let mut f = fixture(tiny_config(mode));
        let ep = episode(&f, 1);
        let before = network_digests(&f.st);
        f.st.train_step(&f.ds, &ep).unwrap();
        let mut got = changed(&before, &network_digests(&f.st));
        got.sort_unstable();
        assert_eq!(got, want, "{mode:?}");
        assert!(!got.contains(&TEACHER) && !got.contains(&STUDENT) && !got.contains(&AUGMENTER));
    }
}

#[test]
fn joint_feature_update_moves_the_student() {
    let mut f = fixture(Config { joint_feature_update: true, ..tiny_config(AblationMode::RecOnly) });
    let ep = episode(&f, 2);
    let before = f.st.student.params.clone();
    f.st.train_step(&f.ds, &ep).unwrap();
    assert!(!same_params(&before, &f.st.student.params));
}

#[test]
fn sub_updates_touch_their_own_parameters() {
    let mut f = fixture(tiny_config(AblationMode::Full));
    let ep = episode(&f, 3);
    let mut views = f.st.sample_views(&f.ds, &ep).unwrap();

    let d0 = network_digests(&f.st);
    f.st.gan_update(&f.ds, &ep, &mut views).unwrap();
    let d1 = network_digests(&f.st);
    assert_eq!(changed(&d0, &d1), vec![DISCRIMINATOR, GENERATOR]);

    f.st.recognition_update(&f.ds, &ep, Some(&views)).unwrap();
    let d2 = network_digests(&f.st);
    assert_eq!(changed(&d1, &d2), vec![EMBEDDING]);

    // categorical feedback reaches the generator but never recognition
    f.st.categorical_update(&f.ds, &ep, &views).unwrap();
    let d3 = network_digests(&f.st);
    assert_eq!(changed(&d2, &d3), vec![GENERATOR]);

    f.st.feature_update(&f.ds, &ep).unwrap();
    assert!(changed(&d3, &network_digests(&f.st)).is_empty());
}

#[test]
fn zero_lambda_cat_measures_without_updating() {
    let mut f = fixture(Config { lambda_cat: 0.0, ..tiny_config(AblationMode::Full) });
    let ep = episode(&f, 4);
    let mut views = f.st.sample_views(&f.ds, &ep).unwrap();
    f.st.gan_update(&f.ds, &ep, &mut views).unwrap();
    let g = f.st.generator.params.clone();
    let steps = f.st.optim.generator.state().step;
    let l_cat = f.st.categorical_update(&f.ds, &ep, &views).unwrap();
    assert!(l_cat.is_finite() && l_cat > 0.0);
    assert!(same_params(&g, &f.st.generator.params));
    assert_eq!(f.st.optim.generator.state().step, steps);
}

#[test]
fn aug_only_keeps_the_augmenter_frozen() {
    let mut f = fixture(tiny_config(AblationMode::AugOnly));
    let aug = f.st.augmenter.as_ref().unwrap().params.clone();
    run_phase(&mut f.st, &f.ds, &f.split, Phase::Base, 3, PhaseOptions::default()).unwrap();
    assert!(same_params(&aug, &f.st.augmenter.as_ref().unwrap().params));

    f.st.augmenter = None;
    let ep = episode(&f, 0);
    assert!(matches!(f.st.train_step(&f.ds, &ep), Err(Error::Data(_))));
}

#[test]
fn support_set_sizes_follow_the_mode() {
    for mode in AblationMode::ALL {
        let cfg = Config { m_views: 2, ..tiny_config(mode) };
        let mut f = fixture(cfg.clone());
        let ep = episode(&f, 5);
        let real = ep.support.len();
        assert_eq!(real, cfg.n_support_base * f.split.base.len());
        let r = f.st.train_step(&f.ds, &ep).unwrap();
        let want = match mode {
            AblationMode::Full | AblationMode::AugOnly => Some(3 * real),
            AblationMode::RecOnly => Some(real),
            AblationMode::ViewOnly => None,
        };
        assert_eq!(r.s_whole, want, "{mode:?}");
        assert_eq!(r.generated, if mode == AblationMode::RecOnly { 0 } else { 2 * real });
        if let Some((lo, hi)) = r.gen_range {
            assert!(-1.0 <= lo && hi <= 1.0);
        }
    }
}

#[test]
fn recorded_total_matches_the_terms() {
    let cfg = Config { lambda_id: 3.0, lambda_cat: 0.25, ..tiny_config(AblationMode::Full) };
    let mut f = fixture(cfg);
    let reports = run_phase(&mut f.st, &f.ds, &f.split, Phase::Base, 3, PhaseOptions::default()).unwrap();
    for r in reports {
        let x = r.record;
        let want = x.l_gan + x.l_rec + x.l_feature + 3.0 * x.l_identity + 0.25 * x.l_cat;
        assert!((x.l_total - want).abs() <= 1e-12 * want.abs().max(1.0));
        for (name, v) in x.terms() {
            assert!(v.is_finite() && v >= 0.0, "{name} = {v}");
        }
    }
}

#[test]
fn terms_absent_from_a_mode_stay_zero() {
    let mut f = fixture(tiny_config(AblationMode::RecOnly));
    let r = run_phase(&mut f.st, &f.ds, &f.split, Phase::Base, 1, PhaseOptions::default()).unwrap();
    let x = r[0].record;
    assert_eq!((x.l_gan, x.l_identity, x.l_cat), (0.0, 0.0, 0.0));
    assert!(x.l_rec > 0.0 && x.l_feature > 0.0);

    let mut f = fixture(tiny_config(AblationMode::ViewOnly));
    let x = run_phase(&mut f.st, &f.ds, &f.split, Phase::Base, 1, PhaseOptions::default()).unwrap()[0].record;
    assert_eq!((x.l_rec, x.l_cat), (0.0, 0.0));
    assert!(x.l_gan > 0.0);
}

#[test]
fn generated_views_shift_the_prototypes() {
    let mut f = fixture(tiny_config(AblationMode::Full));
    let ep = episode(&f, 6);
    let mut views = f.st.sample_views(&f.ds, &ep).unwrap();
    views.images = Some(f.st.render_views(&f.st.generator, &views).unwrap());
    let real = f.st.whole_prototypes(&f.ds, &ep, None).unwrap();
    let whole = f.st.whole_prototypes(&f.ds, &ep, Some(&views)).unwrap();
    assert_eq!(real.categories, whole.categories);
    assert!(whole.counts.iter().zip(&real.counts).all(|(w, r)| *w == 2 * r));
    assert!(real.means.data() != whole.means.data());
}

#[test]
fn zero_iterations_change_nothing() {
    let mut f = fixture(tiny_config(AblationMode::Full));
    let before = network_digests(&f.st);
    let r = run_phase(&mut f.st, &f.ds, &f.split, Phase::Base, 0, PhaseOptions::default()).unwrap();
    assert!(r.is_empty());
    assert_eq!(network_digests(&f.st), before);
    assert_eq!(f.st.iteration, 0);
}

#[test]
fn phase_transitions_are_checked() {
    let mut f = fixture(tiny_config(AblationMode::RecOnly));
    assert!(matches!(run_phase(&mut f.st, &f.ds, &f.split, Phase::Pretrain, 1, PhaseOptions::default()), Err(Error::Data(_))));
    run_phase(&mut f.st, &f.ds, &f.split, Phase::Base, 2, PhaseOptions::default()).unwrap();
    run_phase(&mut f.st, &f.ds, &f.split, Phase::Novel, 1, PhaseOptions::default()).unwrap();
    assert_eq!((f.st.phase, f.st.iteration), (Phase::Novel, 1));
    assert_eq!(f.st.trace.len(), 3);
    assert!(matches!(run_phase(&mut f.st, &f.ds, &f.split, Phase::Base, 1, PhaseOptions::default()), Err(Error::Data(_))));
}

#[test]
fn loss_trace_is_written_with_checkpoints() {
    let mut f = fixture(tiny_config(AblationMode::Full));
    let dir = tempfile::tempdir().unwrap();
    let opts = PhaseOptions { run_dir: Some(dir.path()), checkpoint_interval: 2 };
    run_phase(&mut f.st, &f.ds, &f.split, Phase::Base, 3, opts).unwrap();
    let text = std::fs::read_to_string(dir.path().join(TRACE_FILE)).unwrap();
    assert_eq!(text.lines().next().unwrap(), LossRecord::HEADER);
    let trace = trace_from_text(&text).unwrap();
    assert_eq!(trace, f.st.trace);
    assert_eq!(trace.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(checkpoint_dir(dir.path(), Phase::Base, Some(2)).join("manifest.txt").exists());
    assert!(!checkpoint_dir(dir.path(), Phase::Base, Some(3)).exists());
    assert!(checkpoint_dir(dir.path(), Phase::Base, None).join("manifest.txt").exists());
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut f = fixture(tiny_config(AblationMode::Full));
        run_phase(&mut f.st, &f.ds, &f.split, Phase::Base, 3, PhaseOptions::default()).unwrap();
        f.st
    };
    let (a, b) = (run(), run());
    assert_eq!(a.trace, b.trace);
    assert_eq!(network_digests(&a), network_digests(&b));
}

#[test]
fn augmenter_must_come_from_a_view_only_run_of_the_phase() {
    let mut f = fixture(tiny_config(AblationMode::ViewOnly));
    run_phase(&mut f.st, &f.ds, &f.split, Phase::Base, 1, PhaseOptions::default()).unwrap();
    let ck = f.st.to_checkpoint();
    let aug = build_augmenter_for_aug_mode(&ck, Phase::Base).unwrap();
    assert!(same_params(&aug.params, &f.st.generator.params));
    assert!(matches!(build_augmenter_for_aug_mode(&ck, Phase::Novel), Err(Error::Data(_))));

    let mut full = fixture(tiny_config(AblationMode::Full));
    full.st.phase = Phase::Base;
    assert!(matches!(build_augmenter_for_aug_mode(&full.st.to_checkpoint(), Phase::Base), Err(Error::Data(_))));
}

#[test]
fn routing_table_holds() {
    let bad = common::routing_violations(0);
    assert!(bad.is_empty(), "{bad:#?}");
}
