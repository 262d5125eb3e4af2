//! Episodic joint training: the per-iteration update sequence, phase runner,
//! ablation routing, loss trace and checkpoint conversion.

mod phase;
mod step;

pub use phase::{build_augmenter_for_aug_mode, checkpoint_dir, run_phase, PhaseOptions};
pub use step::{StepReport, Views};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use fbnet_autograd::{Adam, AdamState};

use crate::checkpoint::{Checkpoint, NetworkState};
use crate::config::{AblationMode, Config, Phase};
use crate::error::{Error, Result};
use crate::recognition::{Embedder, Extractor, FeatureCache};
use crate::rng::{Streams, INIT};
use crate::synthesis::{Discriminator, Generator, GeneratorArch};

pub const GENERATOR: &str = "generator";
pub const DISCRIMINATOR: &str = "discriminator";
pub const STUDENT: &str = "student";
pub const TEACHER: &str = "teacher";
pub const EMBEDDING: &str = "embedding";
pub const AUGMENTER: &str = "augmenter";
pub const TRACE_FILE: &str = "losses.tsv";

/// One row of the loss trace.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossRecord {
    pub phase: Option<Phase>,
    pub iteration: u64,
    pub l_gan: f64,
    pub l_rec: f64,
    pub l_feature: f64,
    pub l_identity: f64,
    pub l_cat: f64,
    pub l_total: f64,
}

impl LossRecord {
    pub const HEADER: &'static str = "phase\titeration\tl_gan\tl_rec\tl_feature\tl_identity\tl_cat\tl_total";

    /// `L_GAN + L_rec + L_feature + lambda_id L_id + lambda_cat L_cat`.
    pub fn total(&self, lambda_id: f64, lambda_cat: f64) -> f64 {
        self.l_gan + self.l_rec + self.l_feature + lambda_id * self.l_identity + lambda_cat * self.l_cat
    }

    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("l_gan", self.l_gan),
            ("l_rec", self.l_rec),
            ("l_feature", self.l_feature),
            ("l_identity", self.l_identity),
            ("l_cat", self.l_cat),
            ("l_total", self.l_total),
        ]
    }

    pub fn to_row(&self) -> String {
        let phase = self.phase.map_or("-", Phase::as_str);
        let mut s = format!("{phase}\t{}", self.iteration);
        for (_, v) in self.terms() {
            let _ = write!(s, "\t{v}");
        }
        s
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Data(format!("malformed loss trace row `{line}`"));
        if f.len() != 8 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            phase: if f[0] == "-" { None } else { Some(f[0].parse().map_err(|_| bad())?) },
            iteration: f[1].parse().map_err(|_| bad())?,
            l_gan: num(2)?,
            l_rec: num(3)?,
            l_feature: num(4)?,
            l_identity: num(5)?,
            l_cat: num(6)?,
            l_total: num(7)?,
        })
    }
}

pub fn trace_to_text(trace: &[LossRecord]) -> String {
    let mut s = String::from(LossRecord::HEADER);
    s.push('\n');
    for r in trace {
        s.push_str(&r.to_row());
        s.push('\n');
    }
    s
}

pub fn trace_from_text(text: &str) -> Result<Vec<LossRecord>> {
    text.lines().skip(1).filter(|l| !l.is_empty()).map(LossRecord::parse_row).collect()
}

/// One Adam instance per trained network.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub generator: Adam,
    pub discriminator: Adam,
    pub embedding: Adam,
    pub student: Adam,
}

impl Optimizers {
    pub fn new(cfg: &Config) -> Self {
        let adam = || Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2);
        Self { generator: adam(), discriminator: adam(), embedding: adam(), student: adam() }
    }
}

/// Everything a training run owns. The teacher is frozen; its features
/// are cached lazily by image id.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: Config,
    pub mode: AblationMode,
    pub phase: Phase,
    pub iteration: u64,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub embedder: Embedder,
    pub student: Extractor,
    pub teacher: Extractor,
    /// Frozen view-only generator used as augmenter in `aug_only` mode.
    pub augmenter: Option<Generator>,
    pub optim: Optimizers,
    pub streams: Streams,
    pub trace: Vec<LossRecord>,
    pub teacher_cache: FeatureCache,
}

impl TrainState {
    /// Fresh generator, discriminator and embedding network around a
    /// distilled student and pretrained teacher. Mode and seed come from
    /// `config`.
    pub fn new(config: Config, teacher: Extractor, student: Extractor) -> Result<Self> {
        config.validate()?;
        if student.resolution != config.image_resolution || student.feature_dim != config.feature_dim {
            return Err(Error::config("image_resolution", "student extractor does not match the configured resolution or feature_dim"));
        }
        if teacher.feature_dim != config.feature_dim {
            return Err(Error::config("feature_dim", "teacher feature width differs from feature_dim"));
        }
        let mut streams = Streams::new(config.seed);
        let rng = streams.get(INIT);
        let arch = GeneratorArch::new(config.image_resolution, config.latent_dim(), config.gen_channels)?;
        let generator = Generator::new(arch, rng);
        let discriminator = Discriminator::new(config.image_resolution, config.latent_dim(), config.disc_channels, rng)?;
        let embedder = Embedder::new(config.feature_dim, config.embed_hidden, config.embed_out, rng);
        let teacher_cache = FeatureCache::new(&teacher);
        Ok(Self {
            mode: config.ablation_mode,
            optim: Optimizers::new(&config),
            config,
            phase: Phase::Base,
            iteration: 0,
            generator,
            discriminator,
            embedder,
            student,
            teacher,
            augmenter: None,
            streams,
            trace: Vec::new(),
            teacher_cache,
        })
    }

    /// Number of support images per category in the given phase.
    pub fn shots(&self, phase: Phase) -> usize {
        match phase {
            Phase::Novel => self.config.n_support_novel,
            _ => self.config.n_support_base,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.phase, self.iteration, self.config.clone());
        let net = |p: &fbnet_autograd::ParamSet, a: &Adam| NetworkState { params: p.clone(), adam: Some(a.state().clone()) };
        ck.networks.insert(GENERATOR.into(), net(&self.generator.params, &self.optim.generator));
        ck.networks.insert(DISCRIMINATOR.into(), net(&self.discriminator.params, &self.optim.discriminator));
        ck.networks.insert(EMBEDDING.into(), net(&self.embedder.params, &self.optim.embedding));
        ck.networks.insert(STUDENT.into(), net(&self.student.params, &self.optim.student));
        ck.networks.insert(TEACHER.into(), NetworkState::frozen(self.teacher.params.clone()));
        if let Some(a) = &self.augmenter {
            ck.networks.insert(AUGMENTER.into(), NetworkState::frozen(a.params.clone()));
        }
        ck.rng = self.streams.capture();
        ck.info.insert("mode".into(), self.mode.as_str().into());
        ck.attachments.insert(TRACE_FILE.into(), trace_to_text(&self.trace));
        ck
    }

    /// Rebuilds a state saved by [`TrainState::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck.config.clone();
        let mode: AblationMode = ck
            .info
            .get("mode")
            .ok_or_else(|| Error::Integrity { blob: crate::checkpoint::MANIFEST.into(), message: "missing mode".into() })?
            .parse()?;
        // Architectures are rebuilt from the config, then parameters replaced.
        let mut scratch = crate::rng::seeded_rng(0, INIT);
        let teacher_shape = Extractor::new(cfg.teacher_resolution(), cfg.extractor_channels, cfg.feature_dim, Some(cfg.base_categories), &mut scratch)?;
        let student_shape = Extractor::new(cfg.image_resolution, cfg.extractor_channels, cfg.feature_dim, None, &mut scratch)?;
        let teacher = Extractor { params: load_params(ck, TEACHER, &teacher_shape.params)?, ..teacher_shape };
        let student = Extractor { params: load_params(ck, STUDENT, &student_shape.params)?, ..student_shape };
        let mut st = TrainState::new(cfg.clone(), teacher, student)?;
        st.mode = mode;
        st.phase = ck.phase;
        st.iteration = ck.iteration;
        st.generator.params = load_params(ck, GENERATOR, &st.generator.params)?;
        st.discriminator.params = load_params(ck, DISCRIMINATOR, &st.discriminator.params)?;
        st.embedder.params = load_params(ck, EMBEDDING, &st.embedder.params)?;
        st.optim.generator.set_state(load_adam(ck, GENERATOR)?);
        st.optim.discriminator.set_state(load_adam(ck, DISCRIMINATOR)?);
        st.optim.embedding.set_state(load_adam(ck, EMBEDDING)?);
        st.optim.student.set_state(load_adam(ck, STUDENT)?);
        if ck.networks.contains_key(AUGMENTER) {
            let mut aug = st.generator.clone();
            aug.params = load_params(ck, AUGMENTER, &st.generator.params)?;
            st.augmenter = Some(aug);
        }
        st.streams = Streams::restore(&ck.rng)
            .ok_or_else(|| Error::Integrity { blob: crate::checkpoint::MANIFEST.into(), message: "bad rng state".into() })?;
        st.trace = match ck.attachments.get(TRACE_FILE) {
            Some(t) => trace_from_text(t)?,
            None => Vec::new(),
        };
        st.teacher_cache = FeatureCache::new(&st.teacher);
        Ok(st)
    }
}

/// Parameters of `name`, checked name-by-name and shape-by-shape against
/// the architecture's freshly built set.
pub fn load_params(ck: &Checkpoint, name: &str, like: &fbnet_autograd::ParamSet) -> Result<fbnet_autograd::ParamSet> {
    let stored = &ck.network(name)?.params;
    let blob = format!("{name}.safetensors");
    if stored.len() != like.len() {
        return Err(Error::Integrity { blob, message: format!("{} tensors stored, architecture has {}", stored.len(), like.len()) });
    }
    for (k, t) in like.iter() {
        match stored.get(k) {
            Some(s) if s.shape() == t.shape() => {}
            Some(s) => {
                return Err(Error::Integrity { blob, message: format!("`{k}` has shape {:?}, expected {:?}", s.shape(), t.shape()) })
            }
            None => return Err(Error::Integrity { blob, message: format!("tensor `{k}` missing") }),
        }
    }
    Ok(stored.clone())
}

fn load_adam(ck: &Checkpoint, name: &str) -> Result<AdamState> {
    Ok(ck.network(name)?.adam.clone().unwrap_or_default())
}

/// Digest per network, for update-routing checks.
pub fn network_digests(st: &TrainState) -> BTreeMap<&'static str, String> {
    use crate::checkpoint::param_digest;
    let mut m = BTreeMap::from([
        (GENERATOR, param_digest(&st.generator.params)),
        (DISCRIMINATOR, param_digest(&st.discriminator.params)),
        (EMBEDDING, param_digest(&st.embedder.params)),
        (STUDENT, param_digest(&st.student.params)),
        (TEACHER, param_digest(&st.teacher.params)),
    ]);
    if let Some(a) = &st.augmenter {
        m.insert(AUGMENTER, param_digest(&a.params));
    }
    m
}
