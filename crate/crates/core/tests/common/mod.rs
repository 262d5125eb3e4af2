//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use fbnet::data::{generate_toy_dataset, Dataset, SplitSpec, ToySpec};
use fbnet::pipeline::{new_student, new_teacher, split_dataset};
use fbnet::rng::{normal_vec, seeded_rng, Stream, DATA};
use fbnet::training::TrainState;
use fbnet::{AblationMode, Config, Phase};
use fbnet_autograd::{ParamSet, Tensor};
use rand::RngExt;

pub type M3 = [[f64; 3]; 3];

// ---------------------------------------------------------------- fixtures

/// In-memory toy dataset and its split for `cfg`.
pub fn toy_data(cfg: &Config) -> (Dataset, SplitSpec) {
    let toy = generate_toy_dataset(&ToySpec::from_config(cfg), &mut seeded_rng(cfg.seed, DATA)).unwrap();
    let ds = Dataset::from_images(&toy.manifest, &toy.images, cfg.image_resolution, cfg.teacher_resolution()).unwrap();
    let split = split_dataset(cfg, &ds).unwrap();
    (ds, split)
}

/// 16x16 working resolution, tiny widths, 8 images per toy category.
pub fn tiny_config(mode: AblationMode) -> Config {
    Config {
        image_resolution: 16,
        noise_dim: 4,
        feature_dim: 12,
        embed_hidden: 10,
        embed_out: 6,
        lr: 1e-3,
        gen_channels: 8,
        disc_channels: 4,
        extractor_channels: 4,
        toy_images_per_category: 8,
        ablation_mode: mode,
        iters_base: 4,
        iters_novel: 2,
        ..Config::default()
    }
}

/// Training state around randomly initialised extractors.
pub fn tiny_state(cfg: &Config) -> TrainState {
    TrainState::new(cfg.clone(), new_teacher(cfg).unwrap(), new_student(cfg).unwrap()).unwrap()
}

/// Bitwise parameter comparison.
pub fn same_params(a: &ParamSet, b: &ParamSet) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((na, ta), (nb, tb))| {
            na == nb && ta.shape() == tb.shape() && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

// ------------------------------------------------------------ random data

pub fn rand_tensor(rng: &mut Stream, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, normal_vec(rng, n).into_iter().map(|v| v * scale).collect())
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

pub fn rand_labels(rng: &mut Stream, n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..c)).collect()
}

// ---------------------------------------------------------- loss oracles

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `(loss_D, loss_G)` of the non-saturating objective, from
/// `-log sigma(x) = softplus(-x)` and `-log(1 - sigma(x)) = softplus(x)`.
pub fn gan_oracle(real: &[f64], fake: &[f64]) -> (f64, f64) {
    let d = mean(&real.iter().map(|&x| softplus(-x)).collect::<Vec<_>>()) + mean(&fake.iter().map(|&x| softplus(x)).collect::<Vec<_>>());
    let g = mean(&fake.iter().map(|&x| softplus(-x)).collect::<Vec<_>>());
    (d, g)
}

pub fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Batch mean of per-row squared error summed over columns.
pub fn row_sq_mean(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| sq(x, y)).sum::<f64>() / a.len() as f64
}

pub fn identity_oracle(z: &[Vec<f64>], th: &[Vec<f64>], zp: &[Vec<f64>], thp: &[Vec<f64>]) -> f64 {
    row_sq_mean(z, zp) + row_sq_mean(th, thp)
}

/// Plain per-category means.
pub fn brute_prototypes(emb: &[Vec<f64>], labels: &[usize], cats: &[usize]) -> Vec<Vec<f64>> {
    cats.iter()
        .map(|&c| {
            let members: Vec<&Vec<f64>> = emb.iter().zip(labels).filter(|(_, &l)| l == c).map(|(e, _)| e).collect();
            let mut m = vec![0.0; emb[0].len()];
            for e in &members {
                for (a, b) in m.iter_mut().zip(e.iter()) {
                    *a += b;
                }
            }
            m.iter().map(|v| v / members.len() as f64).collect()
        })
        .collect()
}

/// `exp(-d_c) / sum_j exp(-d_j)` with `d` the squared distance, evaluated
/// from the raw exponentials after a max shift.
pub fn brute_classify(q: &[f64], protos: &[Vec<f64>]) -> Vec<f64> {
    let neg: Vec<f64> = protos.iter().map(|p| -sq(q, p)).collect();
    let m = neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = neg.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Mean `-log p_target` over queries.
pub fn brute_nll(queries: &[Vec<f64>], targets: &[usize], protos: &[Vec<f64>]) -> f64 {
    queries.iter().zip(targets).map(|(q, &t)| -brute_classify(q, protos)[t].ln()).sum::<f64>() / queries.len() as f64
}

// ------------------------------------------------------- geometry oracles

/// Exact `(sin, cos)` of `k` quarter turns.
fn quarter(k: i32) -> (f64, f64) {
    match k.rem_euclid(4) {
        0 => (0.0, 1.0),
        1 => (1.0, 0.0),
        2 => (0.0, -1.0),
        _ => (-1.0, 0.0),
    }
}

pub fn mat_mul(a: &M3, b: &M3) -> M3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

pub fn rx(s: f64, c: f64) -> M3 {
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}
pub fn ry(s: f64, c: f64) -> M3 {
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}
pub fn rz(s: f64, c: f64) -> M3 {
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// `Rz * Ry * Rx` from angles.
pub fn zyx(a: [f64; 3]) -> M3 {
    let f = |t: f64| (t.sin(), t.cos());
    let ((sx, cx), (sy, cy), (sz, cz)) = (f(a[0]), f(a[1]), f(a[2]));
    mat_mul(&rz(sz, cz), &mat_mul(&ry(sy, cy), &rx(sx, cx)))
}

/// Angles `(x, y, z)` with `zyx(angles) == m`, away from gimbal lock.
pub fn zyx_angles(m: &M3) -> [f64; 3] {
    [m[2][1].atan2(m[2][2]), (-m[2][0]).asin(), m[1][0].atan2(m[0][0])]
}

pub fn transpose(m: &M3) -> M3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

/// Rotation of an odd-sided `[C, S, S, S]` grid by quarter turns
/// `(kx, ky, kz)`, as a forward scatter of voxel centres: input voxel at
/// centred coordinate `p` lands on output voxel `R p`.
pub fn quarter_turn_oracle(grid: &Tensor, turns: [i32; 3]) -> Tensor {
    let (c, s) = (grid.shape()[0], grid.shape()[1]);
    assert!(s % 2 == 1);
    let ((sx, cx), (sy, cy), (sz, cz)) = (quarter(turns[0]), quarter(turns[1]), quarter(turns[2]));
    let r = mat_mul(&rz(sz, cz), &mat_mul(&ry(sy, cy), &rx(sx, cx)));
    let h = (s / 2) as i64;
    let mut out = vec![f64::NAN; grid.numel()];
    for ch in 0..c {
        for d in 0..s {
            for y in 0..s {
                for x in 0..s {
                    let p = [x as i64 - h, y as i64 - h, d as i64 - h];
                    let q: Vec<i64> = (0..3).map(|i| (0..3).map(|k| r[i][k] as i64 * p[k]).sum::<i64>() + h).collect();
                    let src = ((ch * s + d) * s + y) * s + x;
                    let dst = ((ch * s + q[2] as usize) * s + q[1] as usize) * s + q[0] as usize;
                    out[dst] = grid.data()[src];
                }
            }
        }
    }
    Tensor::new(grid.shape(), out)
}

/// Smooth grid: a Gaussian window of width `sigma` voxels around the
/// centre modulating plane waves of wavelength at least `4 sigma`.
pub fn band_limited_grid(c: usize, s: usize, sigma: f64, rng: &mut Stream) -> Tensor {
    let h = (s as f64 - 1.0) / 2.0;
    let waves: Vec<([f64; 3], f64)> = (0..c * 3)
        .map(|_| {
            let k = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0) * std::f64::consts::TAU / (4.0 * sigma) / 3f64.sqrt());
            (k, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    Tensor::from_fn(&[c, s, s, s], |i| {
        let x = (i % s) as f64 - h;
        let y = ((i / s) % s) as f64 - h;
        let z = ((i / (s * s)) % s) as f64 - h;
        let ch = i / (s * s * s);
        let win = (-(x * x + y * y + z * z) / (2.0 * sigma * sigma)).exp();
        let mut v = 1.0;
        for (k, ph) in &waves[ch * 3..ch * 3 + 3] {
            v += 0.4 * (k[0] * x + k[1] * y + k[2] * z + ph).cos();
        }
        win * v
    })
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    sq(a, b).sqrt() / b.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub const QUARTER: f64 = FRAC_PI_2;

// ------------------------------------------------------- geometry checks

fn rotate_one(grid: &Tensor, pose: [f64; 3]) -> Tensor {
    use fbnet::geom3d::{rotate_grid, FeatureGrid3D, ViewPose};
    rotate_grid(&FeatureGrid3D::new(grid.clone()).unwrap(), &ViewPose::from_array(pose).unwrap()).unwrap().into_tensor()
}

/// Largest deviation of the zero-pose rotation from its input.
pub fn identity_error(c: usize, s: usize, seed: u64) -> f64 {
    let g = rand_tensor(&mut seeded_rng(seed, "geom"), &[c, s, s, s], 1.0);
    let out = rotate_one(&g, [0.0; 3]);
    out.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Quarter-turn combinations (each axis 0..4 turns) whose output is not
/// bit-identical to the permutation oracle.
pub fn quarter_turn_mismatches(c: usize, s: usize, seed: u64) -> Vec<[i32; 3]> {
    let g = rand_tensor(&mut seeded_rng(seed, "geom"), &[c, s, s, s], 1.0);
    let mut bad = vec![];
    for kx in 0..4 {
        for ky in 0..4 {
            for kz in 0..4 {
                let pose = [kx, ky, kz].map(|k| fbnet::geom3d::wrap_angle(k as f64 * QUARTER));
                let got = rotate_one(&g, pose);
                let want = quarter_turn_oracle(&g, [kx, ky, kz]);
                if got.data().iter().zip(want.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    bad.push([kx, ky, kz]);
                }
            }
        }
    }
    bad
}

/// Relative L2 error of rotating a band-limited grid forward and back,
/// for single-axis `theta / -theta` pairs and for a general pose undone by
/// the Euler angles of its transpose. `sigma` should leave the content
/// well inside the cube's inscribed sphere.
pub fn round_trip_errors(s: usize, sigma: f64, seed: u64) -> Vec<(String, f64)> {
    let mut rng = seeded_rng(seed, "geom");
    let g = band_limited_grid(2, s, sigma, &mut rng);
    let mut out = vec![];
    for axis in 0..3 {
        for theta in [0.3, -0.8, 1.2] {
            let mut fwd = [0.0; 3];
            fwd[axis] = theta;
            let back = fwd.map(|v: f64| -v);
            let r = rotate_one(&rotate_one(&g, fwd), back);
            out.push((format!("axis {axis} theta {theta}"), rel_l2(r.data(), g.data())));
        }
    }
    for pose in [[0.4, -0.9, 0.2], [-0.3, 2.1, -0.5]] {
        let inv = zyx_angles(&transpose(&zyx(pose)));
        let r = rotate_one(&rotate_one(&g, pose), inv);
        out.push((format!("pose {pose:?}"), rel_l2(r.data(), g.data())));
    }
    out
}

/// Relative error between the analytic pose gradient of
/// `sum(w * rotate(grid, pose))` and central finite differences, for smooth
/// `grid` and `w`. Trilinear sampling has slope kinks at voxel boundaries,
/// so the step is kept small enough that almost no sample crosses one.
pub fn pose_gradient_error(s: usize, pose: [f64; 3], seed: u64) -> f64 {
    use fbnet::geom3d::rotate_grid_batch;
    use fbnet_autograd::Graph;
    let mut rng = seeded_rng(seed, "geom");
    let g = band_limited_grid(2, s, s as f64 / 6.0, &mut rng).reshape(&[1, 2, s, s, s]);
    let w = band_limited_grid(2, s, s as f64 / 6.0, &mut rng).reshape(&[1, 2, s, s, s]);
    let objective = |p: [f64; 3]| -> f64 {
        let gr = Graph::new();
        let y = rotate_grid_batch(&gr.constant(g.clone()), &gr.constant(Tensor::new(&[1, 3], p.to_vec()))).unwrap();
        y.value().data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let analytic = {
        let gr = Graph::new();
        let pv = gr.variable(Tensor::new(&[1, 3], pose.to_vec()));
        let y = rotate_grid_batch(&gr.constant(g.clone()), &pv).unwrap();
        let loss = y.mul(&gr.constant(w.clone())).sum();
        gr.backward(loss, &[pv]).get(pv).into_data()
    };
    let h = 1e-7;
    let fd: Vec<f64> = (0..3)
        .map(|a| {
            let (mut p, mut m) = (pose, pose);
            p[a] += h;
            m[a] -= h;
            (objective(p) - objective(m)) / (2.0 * h)
        })
        .collect();
    rel_l2(&analytic, &fd)
}

// ----------------------------------------------------- named-check tables

/// A measured deviation and the tolerance it must meet.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub err: f64,
    pub tol: f64,
}

impl Check {
    pub fn new(name: impl Into<String>, err: f64, tol: f64) -> Self {
        Self { name: name.into(), err, tol }
    }

    pub fn ok(&self) -> bool {
        self.err <= self.tol
    }
}

pub fn assert_checks(checks: &[Check]) {
    let bad: Vec<&Check> = checks.iter().filter(|c| !c.ok()).collect();
    assert!(bad.is_empty(), "failed checks: {bad:#?}");
}

fn scalar_err(a: f64, b: f64) -> f64 {
    (a - b).abs()
}

/// Every loss against its direct-formula recomputation on random batches,
/// plus the analytic examples.
pub fn loss_checks(seed: u64) -> Vec<Check> {
    use fbnet::recognition::{categorical_loss, compute_prototypes, distill_loss, rec_loss};
    use fbnet::synthesis::{gan_losses, identity_loss};
    use fbnet::training::LossRecord;
    use fbnet_autograd::Graph;

    let mut rng = seeded_rng(seed, "loss");
    let mut out = vec![];
    for trial in 0..10 {
        let n = 3 + trial;
        let g = Graph::new();
        let real = rand_tensor(&mut rng, &[n], 2.5);
        let fake = rand_tensor(&mut rng, &[n], 2.5);
        let (ld, lg) = gan_losses(&g.constant(real.clone()), &g.constant(fake.clone()));
        let (od, og) = gan_oracle(real.data(), fake.data());
        out.push(Check::new(format!("gan loss_D #{trial}"), scalar_err(ld.item(), od), 1e-6));
        out.push(Check::new(format!("gan loss_G #{trial}"), scalar_err(lg.item(), og), 1e-6));

        let l = 5 + trial;
        let ts = [rand_tensor(&mut rng, &[n, l], 1.0), rand_tensor(&mut rng, &[n, 3], 1.0), rand_tensor(&mut rng, &[n, l], 1.0), rand_tensor(&mut rng, &[n, 3], 1.0)];
        let v = ts.clone().map(|t| g.constant(t));
        let id = identity_loss(&v[0], &v[1], &v[2], &v[3]).item();
        out.push(Check::new(format!("identity #{trial}"), scalar_err(id, identity_oracle(&rows(&ts[0]), &rows(&ts[1]), &rows(&ts[2]), &rows(&ts[3]))), 1e-6));

        let s = rand_tensor(&mut rng, &[n, 7], 1.0);
        let t = rand_tensor(&mut rng, &[n, 7], 1.0);
        let dl = distill_loss(&g.constant(s.clone()), &g.constant(t.clone())).item();
        out.push(Check::new(format!("distill #{trial}"), scalar_err(dl, row_sq_mean(&rows(&s), &rows(&t))), 1e-6));

        let c = 2 + trial % 5;
        let protos = rand_tensor(&mut rng, &[c, 4], 1.0);
        let q = rand_tensor(&mut rng, &[n, 4], 1.0);
        let targets = rand_labels(&mut rng, n, c);
        let rl = rec_loss(&g.constant(q.clone()), &targets, &g.constant(protos.clone())).item();
        out.push(Check::new(format!("rec_loss #{trial}"), scalar_err(rl, brute_nll(&rows(&q), &targets, &rows(&protos))), 1e-9));

        // categorical loss with prototypes from a support set and category
        // ids that are not row indices
        let cats: Vec<usize> = (0..c).map(|k| 10 + 3 * k).collect();
        let mut support_labels: Vec<usize> = cats.clone();
        support_labels.extend(rand_labels(&mut rng, 2 * c, c).into_iter().map(|k| cats[k]));
        let support = rand_tensor(&mut rng, &[support_labels.len(), 4], 1.0);
        let ps = compute_prototypes(&support, &support_labels, &cats).unwrap();
        let gen_cats: Vec<usize> = rand_labels(&mut rng, n, c).into_iter().map(|k| cats[k]).collect();
        let cl = categorical_loss(&g.constant(q.clone()), &gen_cats, &ps).unwrap().item();
        let brute_p = brute_prototypes(&rows(&support), &support_labels, &cats);
        let rows_idx: Vec<usize> = gen_cats.iter().map(|gc| cats.iter().position(|c| c == gc).unwrap()).collect();
        out.push(Check::new(format!("categorical #{trial}"), scalar_err(cl, brute_nll(&rows(&q), &rows_idx, &brute_p)), 1e-9));

        let terms: Vec<f64> = normal_vec(&mut rng, 5).into_iter().map(f64::abs).collect();
        let (lid, lcat) = (rng.random_range(0.0..20.0), rng.random_range(0.0..2.0));
        let rec = LossRecord { l_gan: terms[0], l_rec: terms[1], l_feature: terms[2], l_identity: terms[3], l_cat: terms[4], ..Default::default() };
        let direct = terms[0] + terms[1] + terms[2] + lid * terms[3] + lcat * terms[4];
        out.push(Check::new(format!("total #{trial}"), scalar_err(rec.total(lid, lcat), direct), 1e-6));
    }

    // analytic examples
    let g = Graph::new();
    let zeros = g.constant(Tensor::zeros(&[6]));
    let (ld, lg) = gan_losses(&zeros, &zeros);
    out.push(Check::new("gan zero logits: loss_D = 2 log 2", scalar_err(ld.item(), 2.0 * 2f64.ln()), 1e-12));
    out.push(Check::new("gan zero logits: loss_G = log 2", scalar_err(lg.item(), 2f64.ln()), 1e-12));
    let z = g.constant(Tensor::new(&[1, 4], vec![0.5, -1.0, 2.0, 0.0]));
    let th = g.constant(Tensor::new(&[1, 3], vec![0.1, 0.2, 0.3]));
    let th1 = g.constant(Tensor::new(&[1, 3], vec![1.1, 0.2, 0.3]));
    out.push(Check::new("identity z'=z, theta'=theta -> 0", identity_loss(&z, &th, &z, &th).item().abs(), 1e-12));
    out.push(Check::new("identity theta'=theta+(1,0,0) -> 1", scalar_err(identity_loss(&z, &th, &z, &th1).item(), 1.0), 1e-12));
    out.push(Check::new("distill identical features -> 0", distill_loss(&z, &z).item().abs(), 0.0));
    // query exactly on its prototype, the others far away: p = 1
    let far = g.constant(Tensor::new(&[3, 2], vec![0.0, 0.0, 100.0, 0.0, 0.0, 100.0]));
    let q = g.constant(Tensor::new(&[2, 2], vec![0.0, 0.0, 100.0, 0.0]));
    out.push(Check::new("rec_loss perfect prediction -> 0", rec_loss(&q, &[0, 1], &far).item().abs(), 0.0));
    // query at the origin, prototypes on unit axes: uniform over 4
    let axes = Tensor::new(&[4, 2], vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
    let origin = g.constant(Tensor::zeros(&[1, 2]));
    out.push(Check::new("rec_loss uniform -> log C", scalar_err(rec_loss(&origin, &[2], &g.constant(axes.clone())).item(), 4f64.ln()), 1e-12));
    let ps_far = compute_prototypes(&far.value(), &[5, 6, 7], &[5, 6, 7]).unwrap();
    out.push(Check::new("categorical p = 1 -> 0", categorical_loss(&q, &[5, 6], &ps_far).unwrap().item().abs(), 0.0));
    let ps_axes = compute_prototypes(&axes, &[1, 2, 3, 4], &[1, 2, 3, 4]).unwrap();
    out.push(Check::new("categorical uniform -> log C", scalar_err(categorical_loss(&origin, &[3], &ps_axes).unwrap().item(), 4f64.ln()), 1e-12));
    out
}

/// Prototype construction and classification against brute force on
/// random instances, plus the two-prototype example.
pub fn prototype_checks(seed: u64, instances: usize) -> Vec<Check> {
    use fbnet::recognition::{classify, compute_prototypes, PrototypeSet};
    let mut rng = seeded_rng(seed, "proto");
    let mut out = vec![];
    for i in 0..instances {
        let c = rng.random_range(2..8usize);
        let d = rng.random_range(1..10usize);
        let n = c + rng.random_range(0..20usize);
        let cats: Vec<usize> = (0..c).map(|k| 2 * k + rng.random_range(0..2usize)).collect();
        let mut labels = cats.clone();
        labels.extend(rand_labels(&mut rng, n - c, c).into_iter().map(|k| cats[k]));
        let emb = rand_tensor(&mut rng, &[n, d], 3.0);
        let ps = compute_prototypes(&emb, &labels, &cats).unwrap();
        let brute = brute_prototypes(&rows(&emb), &labels, &cats);
        let perr = rows(&ps.means).iter().zip(&brute).map(|(a, b)| sq(a, b).sqrt()).fold(0.0, f64::max);
        out.push(Check::new(format!("prototypes #{i}"), perr, 1e-7));
        let q = rand_tensor(&mut rng, &[5, d], 3.0);
        let p = classify(&q, &ps);
        let cerr = rows(&q)
            .iter()
            .zip(rows(&p))
            .map(|(qr, pr)| brute_classify(qr, &brute).iter().zip(&pr).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        out.push(Check::new(format!("classify #{i}"), cerr, 1e-9));
    }
    let two = PrototypeSet { categories: vec![0, 1], means: Tensor::new(&[2, 1], vec![0.0, 1.0]), counts: vec![1, 1] };
    let p = classify(&Tensor::new(&[1, 1], vec![0.0]), &two);
    let round4 = |v: f64| (v * 1e4).round() / 1e4;
    out.push(Check::new("two prototypes p0 = 0.7311", scalar_err(round4(p.data()[0]), 0.7311), 1e-12));
    out.push(Check::new("two prototypes p1 = 0.2689", scalar_err(round4(p.data()[1]), 0.2689), 1e-12));
    out
}

/// Samples in `[n, 1]` with the given mean and unbiased variance.
pub fn two_point_set(mean: f64, var: f64, n_pairs: usize) -> Tensor {
    // n_pairs copies of mean +- a: unbiased variance 2 n a^2 / (2n - 1)
    let n = 2 * n_pairs;
    let a = (var * (n as f64 - 1.0) / n as f64).sqrt();
    Tensor::new(&[n, 1], (0..n).map(|i| if i % 2 == 0 { mean + a } else { mean - a }).collect())
}

pub fn metric_checks(seed: u64) -> Vec<Check> {
    use fbnet::eval::{fid, inception_score};
    let mut rng = seeded_rng(seed, "metric");
    let mut out = vec![];
    let a = rand_tensor(&mut rng, &[40, 5], 1.0);
    out.push(Check::new("FID identical sets -> 0", fid(&a, &a).unwrap().abs(), 1e-6));
    out.push(Check::new("FID (0,1) vs (1,1) -> 1", scalar_err(fid(&two_point_set(0.0, 1.0, 3), &two_point_set(1.0, 1.0, 3)).unwrap(), 1.0), 1e-6));
    out.push(Check::new("FID (0,4) vs (0,1) -> 1", scalar_err(fid(&two_point_set(0.0, 4.0, 3), &two_point_set(0.0, 1.0, 3)).unwrap(), 1.0), 1e-6));
    for k in 0..3 {
        let x = rand_tensor(&mut rng, &[60, 6], 1.0);
        let y = rand_tensor(&mut rng, &[50, 6], 1.5).map(|v| v + 0.3 * k as f64);
        let (f1, f2) = (fid(&x, &y).unwrap(), fid(&y, &x).unwrap());
        out.push(Check::new(format!("FID symmetry #{k}"), scalar_err(f1, f2) / f1.abs().max(1.0), 1e-6));
    }
    let x = rand_tensor(&mut rng, &[10_000, 8], 1.0);
    let y = rand_tensor(&mut rng, &[10_000, 8], 1.0);
    out.push(Check::new("FID same Gaussian < 0.05", fid(&x, &y).unwrap(), 0.05));

    let c = 10;
    let uniform = Tensor::full(&[200, c], 1.0 / c as f64);
    let (is_u, _) = inception_score(&uniform, 5).unwrap();
    out.push(Check::new("IS uniform rows -> 1", scalar_err(is_u, 1.0), 1e-9));
    let onehot = Tensor::from_fn(&[200, c], |i| if (i / c) % c == i % c { 1.0 } else { 0.0 });
    let (is_h, sd_h) = inception_score(&onehot, 5).unwrap();
    out.push(Check::new("IS one-hot diverse -> C", scalar_err(is_h, c as f64), 1e-9));
    out.push(Check::new("IS one-hot diverse std -> 0", sd_h.abs(), 1e-9));
    out
}

// ------------------------------------------------------- update routing

fn changed_networks(before: &BTreeMap<&'static str, String>, after: &BTreeMap<&'static str, String>) -> Vec<&'static str> {
    before.iter().filter(|(k, v)| after.get(*k) != Some(v)).map(|(k, _)| *k).collect()
}

fn routing_state(cfg: &Config) -> TrainState {
    let mut st = tiny_state(cfg);
    if cfg.ablation_mode == AblationMode::AugOnly {
        let mut aug = st.generator.clone();
        aug.params.iter_mut().for_each(|(_, t)| *t = t.map(|v| v * 0.9));
        st.augmenter = Some(aug);
    }
    st
}

/// Every deviation from the parameter-delta partition of each mode and
/// each sub-update; empty when routing is correct.
pub fn routing_violations(seed: u64) -> Vec<String> {
    use fbnet::data::sample_episode;
    use fbnet::training::{network_digests, DISCRIMINATOR, EMBEDDING, GENERATOR, STUDENT};

    let mut bad = vec![];
    let mut expect = |what: String, got: Vec<&'static str>, want: &[&'static str]| {
        if got != want {
            bad.push(format!("{what}: changed {got:?}, expected {want:?}"));
        }
    };
    let base = Config { seed, ..tiny_config(AblationMode::Full) };
    let (ds, split) = toy_data(&base);
    let episode = |st: &TrainState, k: u64| {
        sample_episode(&split, Phase::Base, st.config.n_support_base, st.config.n_query, &mut seeded_rng(seed + k, DATA)).unwrap()
    };

    // whole iterations
    let table: [(AblationMode, bool, &[&'static str]); 6] = [
        (AblationMode::Full, false, &[DISCRIMINATOR, EMBEDDING, GENERATOR]),
        (AblationMode::RecOnly, false, &[EMBEDDING]),
        (AblationMode::ViewOnly, false, &[DISCRIMINATOR, GENERATOR]),
        (AblationMode::AugOnly, false, &[EMBEDDING]),
        (AblationMode::Full, true, &[DISCRIMINATOR, EMBEDDING, GENERATOR, STUDENT]),
        (AblationMode::RecOnly, true, &[EMBEDDING, STUDENT]),
    ];
    for (mode, joint, want) in table {
        let cfg = Config { ablation_mode: mode, joint_feature_update: joint, ..base.clone() };
        let mut st = routing_state(&cfg);
        for k in 0..2 {
            let ep = episode(&st, k);
            let before = network_digests(&st);
            st.train_step(&ds, &ep).unwrap();
            expect(format!("{mode} (joint {joint}) iteration {k}"), changed_networks(&before, &network_digests(&st)), want);
        }
    }

    // sub-updates, for both lambda_cat settings
    for lambda_cat in [1.0, 0.0] {
        let cfg = Config { lambda_cat, ..base.clone() };
        let mut st = routing_state(&cfg);
        let ep = episode(&st, 7);
        let mut views = st.sample_views(&ds, &ep).unwrap();
        let d0 = network_digests(&st);
        st.gan_update(&ds, &ep, &mut views).unwrap();
        let d1 = network_digests(&st);
        expect(format!("gan/identity step (lambda_cat {lambda_cat})"), changed_networks(&d0, &d1), &[DISCRIMINATOR, GENERATOR]);
        st.recognition_update(&ds, &ep, Some(&views)).unwrap();
        let d2 = network_digests(&st);
        expect(format!("recognition step (lambda_cat {lambda_cat})"), changed_networks(&d1, &d2), &[EMBEDDING]);
        st.categorical_update(&ds, &ep, &views).unwrap();
        let d3 = network_digests(&st);
        let want: &[&'static str] = if lambda_cat > 0.0 { &[GENERATOR] } else { &[] };
        expect(format!("categorical step (lambda_cat {lambda_cat})"), changed_networks(&d2, &d3), want);
        st.feature_update(&ds, &ep).unwrap();
        expect(format!("feature step (lambda_cat {lambda_cat})"), changed_networks(&d3, &network_digests(&st)), &[]);
    }
    bad
}
