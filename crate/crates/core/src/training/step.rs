//! The sub-updates of one training iteration, in order:
//! view sampling, adversarial/identity update, recognition update on the
//! augmented support, categorical feedback into the generator, and the
//! feature-matching term.

use std::collections::BTreeMap;

use fbnet_autograd::{Graph, Tensor, Var};

use super::{LossRecord, TrainState};
use crate::config::AblationMode;
use crate::data::{Dataset, Episode};
use crate::error::{Error, Result};
use crate::geom3d::{sample_pose, PoseRanges, ViewPose};
use crate::recognition::{categorical_loss, compute_prototypes, distill_loss, rec_loss, segment_ids, PrototypeSet};
use crate::rng::{normal_vec, NOISE, VIEWS};
use crate::synthesis::{gan_losses, identity_loss, pose_tensor, Generator};

/// Latents, poses and (once generated) images for the support set's
/// synthesized views. Item `v * |S| + s` is view `v` of support image `s`.
#[derive(Clone, Debug)]
pub struct Views {
    /// `[M, L]`.
    pub z: Tensor,
    pub poses: Vec<ViewPose>,
    /// Conditioning category of each item.
    pub labels: Vec<usize>,
    /// Position of the conditioning image within the episode's support.
    pub source: Vec<usize>,
    /// `[M, 3, R, R]`, filled by generation.
    pub images: Option<Tensor>,
}

impl Views {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn chunks(&self, size: usize) -> Vec<std::ops::Range<usize>> {
        let m = self.len();
        (0..m).step_by(size.max(1)).map(|a| a..(a + size.max(1)).min(m)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub record: LossRecord,
    /// Members of the augmented support set, when one was formed.
    pub s_whole: Option<usize>,
    pub generated: usize,
    /// Pixel range of the images generated this step.
    pub gen_range: Option<(f64, f64)>,
    pub query_reuses_support: bool,
}

fn finite(term: &str, iteration: u64, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term: term.into(), iteration, value: v })
    }
}

fn add_grads(acc: &mut BTreeMap<String, Tensor>, g: BTreeMap<String, Tensor>) {
    for (k, t) in g {
        match acc.get_mut(&k) {
            Some(a) => a.add_assign(&t),
            None => {
                acc.insert(k, t);
            }
        }
    }
}

fn range_of(t: &Tensor) -> (f64, f64) {
    t.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

impl TrainState {
    fn next_iteration(&self) -> u64 {
        self.iteration + 1
    }

    /// Generator driving the views: the frozen augmenter in `aug_only`
    /// mode, the trained generator otherwise.
    pub fn view_generator(&self) -> &Generator {
        match (&self.augmenter, self.mode) {
            (Some(a), AblationMode::AugOnly) => a,
            _ => &self.generator,
        }
    }

    /// Step 1: `z = F_low(x) ⊕ n` for every support image, `m_views`
    /// times, each with a freshly sampled pose.
    pub fn sample_views(&mut self, ds: &Dataset, ep: &Episode) -> Result<Views> {
        let f = self.student.features(&ds.low_batch(&ep.support))?;
        let (s, fd, nd) = (ep.support.len(), self.config.feature_dim, self.config.noise_dim);
        let m = self.config.m_views * s;
        let ranges = PoseRanges::from_config(&self.config);
        let mut z = Vec::with_capacity(m * (fd + nd));
        let (mut poses, mut labels, mut source) = (vec![], vec![], vec![]);
        for _ in 0..self.config.m_views {
            for (j, &label) in ep.support_labels.iter().enumerate() {
                z.extend_from_slice(&f.data()[j * fd..(j + 1) * fd]);
                z.extend(normal_vec(self.streams.get(NOISE), nd));
                poses.push(sample_pose(&ranges, self.streams.get(VIEWS))?);
                labels.push(label);
                source.push(j);
            }
        }
        Ok(Views { z: Tensor::new(&[m, fd + nd], z), poses, labels, source, images: None })
    }

    /// Tape-free generation of every view with `generator`, chunked by
    /// `gan_batch`.
    pub fn render_views(&self, generator: &Generator, views: &Views) -> Result<Tensor> {
        let mut parts = Vec::new();
        for r in views.chunks(self.config.gan_batch) {
            parts.push(generator.generate(&views.z.slice_outer(r.start, r.end), &views.poses[r])?);
        }
        Ok(Tensor::stack_outer(&parts.iter().collect::<Vec<_>>()))
    }

    /// Step 2: per `gan_batch` chunk, one generator pass; the
    /// discriminator/encoder steps on `loss_D + lambda_id L_id` and the
    /// generator on `loss_G + lambda_id L_id` (or `loss_G` alone with
    /// `identity_updates_d_only`), simultaneously. Stores the pre-update
    /// images in `views`. Returns `(L_GAN, L_id)` averaged over items.
    pub fn gan_update(&mut self, ds: &Dataset, ep: &Episode, views: &mut Views) -> Result<(f64, f64)> {
        let it = self.next_iteration();
        let lambda_id = self.config.lambda_id;
        let (mut l_gan, mut l_id) = (0.0, 0.0);
        let mut images = Vec::new();
        let m = views.len() as f64;
        for r in views.chunks(self.config.gan_batch) {
            let real_idx: Vec<usize> = views.source[r.clone()].iter().map(|&j| ep.support[j]).collect();
            let (g_grads, d_grads) = {
                let g = Graph::new();
                let gb = g.bind(&self.generator.params, true);
                let db = g.bind(&self.discriminator.params, true);
                let z = g.constant(views.z.slice_outer(r.start, r.end));
                let theta = g.constant(pose_tensor(&views.poses[r.clone()]));
                let fake = self.generator.forward(&gb, &z, &z, &theta)?.image;
                let real = g.constant(ds.low_batch(&real_idx));
                let d_real = self.discriminator.forward(&db, &real)?;
                let d_fake = self.discriminator.forward(&db, &fake)?;
                let (loss_d, loss_g) = gan_losses(&d_real.logit, &d_fake.logit);
                let id = identity_loss(&z, &theta, &d_fake.z_prime, &d_fake.theta_prime);
                let w = r.len() as f64 / m;
                l_gan += w * finite("l_gan", it, loss_d.item() + loss_g.item())?;
                l_id += w * finite("l_identity", it, id.item())?;
                let d_obj = loss_d.add(&id.mul_scalar(lambda_id));
                let g_obj = if self.config.identity_updates_d_only { loss_g } else { loss_g.add(&id.mul_scalar(lambda_id)) };
                let dg = g.backward(d_obj, &db.vars());
                let gg = g.backward(g_obj, &gb.vars());
                images.push((*fake.value()).clone());
                (gb.grads(&gg), db.grads(&dg))
            };
            self.optim.discriminator.step(&mut self.discriminator.params, &d_grads);
            self.optim.generator.step(&mut self.generator.params, &g_grads);
        }
        views.images = Some(Tensor::stack_outer(&images.iter().collect::<Vec<_>>()));
        Ok((l_gan, l_id))
    }

    /// Support plus generated members with their labels, and the segment
    /// index of each within the episode's category list.
    fn whole_support(&self, ds: &Dataset, ep: &Episode, augmented: Option<&Views>) -> Result<(Tensor, Vec<usize>)> {
        let mut images = ds.low_batch(&ep.support);
        let mut labels = ep.support_labels.clone();
        if let Some(v) = augmented {
            let gen = v.images.as_ref().ok_or_else(|| Error::Data("views were not generated".into()))?;
            images = Tensor::stack_outer(&[&images, gen]);
            labels.extend(&v.labels);
        }
        Ok((images, labels))
    }

    /// Prototypes of the whole support under the current recognition
    /// module, as plain values.
    pub fn whole_prototypes(&self, ds: &Dataset, ep: &Episode, augmented: Option<&Views>) -> Result<PrototypeSet> {
        let (images, labels) = self.whole_support(ds, ep, augmented)?;
        let emb = self.embedder.embed(&self.student.features(&images)?);
        compute_prototypes(&emb, &labels, &ep.categories)
    }

    /// Steps 3 and 4: prototypes over `S_whole` (generated members enter
    /// as detached inputs), cross-entropy of the real queries, update of
    /// the embedding network (and the student under `joint_feature_update`).
    /// Returns `(L_rec, |S_whole|)`.
    pub fn recognition_update(&mut self, ds: &Dataset, ep: &Episode, augmented: Option<&Views>) -> Result<(f64, usize)> {
        let it = self.next_iteration();
        let joint = self.config.joint_feature_update;
        let (images, labels) = self.whole_support(ds, ep, augmented)?;
        let s_whole = labels.len();
        let seg = segment_ids(&labels, &ep.categories)?;
        let targets = segment_ids(&ep.query_labels, &ep.categories)?;
        let queries = ds.low_batch(&ep.query);
        let (p_grads, f_grads, loss) = {
            let g = Graph::new();
            let pb = g.bind(&self.embedder.params, true);
            let fb = g.bind(&self.student.params, joint);
            let feats = |x: Tensor| -> Result<Var<'_>> {
                if joint {
                    Ok(self.student.forward(&fb, &g.constant(x))?.features)
                } else {
                    Ok(g.constant(self.student.features(&x)?))
                }
            };
            let support_emb = self.embedder.forward(&pb, &feats(images)?);
            let protos = support_emb.segment_mean(&seg, ep.categories.len());
            let query_emb = self.embedder.forward(&pb, &feats(queries)?);
            let loss = rec_loss(&query_emb, &targets, &protos);
            let lv = finite("l_rec", it, loss.item())?;
            let mut wrt = pb.vars();
            if joint {
                wrt.extend(fb.vars());
            }
            let grads = g.backward(loss, &wrt);
            (pb.grads(&grads), if joint { Some(fb.grads(&grads)) } else { None }, lv)
        };
        self.optim.embedding.step(&mut self.embedder.params, &p_grads);
        if let Some(fg) = f_grads {
            self.optim.student.step(&mut self.student.params, &fg);
        }
        Ok((loss, s_whole))
    }

    /// Step 5: regenerate the views with the current generator and push
    /// `lambda_cat L_cat` into it. Prototypes come from the current
    /// recognition module as constants, so recognition parameters never
    /// move here. With `lambda_cat = 0` the term is only measured.
    pub fn categorical_update(&mut self, ds: &Dataset, ep: &Episode, views: &Views) -> Result<f64> {
        let it = self.next_iteration();
        let lambda_cat = self.config.lambda_cat;
        let protos = self.whole_prototypes(ds, ep, Some(views))?;
        let m = views.len() as f64;
        let mut total = 0.0;
        let mut acc = BTreeMap::new();
        for r in views.chunks(self.config.gan_batch) {
            let g = Graph::new();
            let train = lambda_cat > 0.0;
            let gb = g.bind(&self.generator.params, train);
            let fb = g.bind(&self.student.params, false);
            let pb = g.bind(&self.embedder.params, false);
            let z = g.constant(views.z.slice_outer(r.start, r.end));
            let theta = g.constant(pose_tensor(&views.poses[r.clone()]));
            let img = self.generator.forward(&gb, &z, &z, &theta)?.image;
            let emb = self.embedder.forward(&pb, &self.student.forward(&fb, &img)?.features);
            let loss = categorical_loss(&emb, &views.labels[r.clone()], &protos)?;
            let w = r.len() as f64 / m;
            total += w * finite("l_cat", it, loss.item())?;
            if train {
                let grads = g.backward(loss.mul_scalar(w * lambda_cat), &gb.vars());
                add_grads(&mut acc, gb.grads(&grads));
            }
        }
        if lambda_cat > 0.0 {
            self.optim.generator.step(&mut self.generator.params, &acc);
        }
        Ok(total)
    }

    /// Step 6: feature-matching loss of the student against the teacher on
    /// support and query images; the student steps on it only under
    /// `joint_feature_update`. Returns the pre-update value.
    pub fn feature_update(&mut self, ds: &Dataset, ep: &Episode) -> Result<f64> {
        let it = self.next_iteration();
        let mut idx = ep.support.clone();
        idx.extend(&ep.query);
        self.teacher_cache.fill(&self.teacher, ds, &idx)?;
        let target = self.teacher_cache.batch(ds, &idx)?;
        let x = ds.low_batch(&idx);
        if !self.config.joint_feature_update {
            let s = self.student.features(&x)?;
            let sq: f64 = s.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
            return finite("l_feature", it, sq / idx.len() as f64);
        }
        let (grads, lv) = {
            let g = Graph::new();
            let fb = g.bind(&self.student.params, true);
            let out = self.student.forward(&fb, &g.constant(x))?;
            let loss = distill_loss(&out.features, &g.constant(target));
            let lv = finite("l_feature", it, loss.item())?;
            let grads = g.backward(loss, &fb.vars());
            (fb.grads(&grads), lv)
        };
        self.optim.student.step(&mut self.student.params, &grads);
        Ok(lv)
    }

    /// One full iteration with mode routing:
    ///
    /// | mode      | views | GAN/id | recognition | categorical |
    /// |-----------|-------|--------|-------------|-------------|
    /// | full      | G     | yes    | S ∪ views   | yes         |
    /// | rec_only  | -     | -      | S           | -           |
    /// | view_only | G     | yes    | -           | -           |
    /// | aug_only  | frozen| -      | S ∪ views   | -           |
    ///
    /// The feature term is measured in every mode.
    pub fn train_step(&mut self, ds: &Dataset, ep: &Episode) -> Result<StepReport> {
        let it = self.next_iteration();
        let mut rec = LossRecord { phase: Some(self.phase), iteration: it, ..Default::default() };
        let views = match self.mode {
            AblationMode::Full | AblationMode::ViewOnly => {
                let mut v = self.sample_views(ds, ep)?;
                let (gan, id) = self.gan_update(ds, ep, &mut v)?;
                rec.l_gan = gan;
                rec.l_identity = id;
                Some(v)
            }
            AblationMode::AugOnly => {
                if self.augmenter.is_none() {
                    return Err(Error::Data("aug_only mode needs a frozen augmenter".into()));
                }
                let mut v = self.sample_views(ds, ep)?;
                v.images = Some(self.render_views(self.view_generator(), &v)?);
                Some(v)
            }
            AblationMode::RecOnly => None,
        };
        let mut s_whole = None;
        if self.mode.trains_recognition() {
            let augmented = if self.mode.augments() { views.as_ref() } else { None };
            let (l_rec, n) = self.recognition_update(ds, ep, augmented)?;
            rec.l_rec = l_rec;
            s_whole = Some(n);
        }
        if self.mode == AblationMode::Full {
            let v = views.as_ref().expect("full mode samples views");
            rec.l_cat = self.categorical_update(ds, ep, v)?;
        }
        rec.l_feature = self.feature_update(ds, ep)?;
        rec.l_total = finite("l_total", it, rec.total(self.config.lambda_id, self.config.lambda_cat))?;
        self.iteration = it;
        self.trace.push(rec);
        Ok(StepReport {
            record: rec,
            s_whole,
            generated: views.as_ref().map_or(0, Views::len),
            gen_range: views.as_ref().and_then(|v| v.images.as_ref()).map(range_of),
            query_reuses_support: ep.query_reuses_support,
        })
    }
}
