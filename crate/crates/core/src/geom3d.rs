//! Rigid rotation of cubic 3D feature grids.
//!
//! Conventions: `R = Rz(theta_z) * Ry(theta_y) * Rx(theta_x)`. A grid
//! `[C, D, H, W]` is indexed so that x runs along W, y along H and z along D,
//! with coordinates measured from the grid centre. Rotation is an inverse
//! warp: output voxel `p` reads the input at `R^T p` by trilinear
//! interpolation, and anything outside the cube reads as zero.

use std::f64::consts::{FRAC_PI_2, PI};

use fbnet_autograd::{Tensor, Var};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewPose {
    pub theta_x: f64,
    pub theta_y: f64,
    pub theta_z: f64,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

impl ViewPose {
    pub const IDENTITY: ViewPose = ViewPose { theta_x: 0.0, theta_y: 0.0, theta_z: 0.0 };

    /// Builds a pose with every angle wrapped into `(-pi, pi]`.
    pub fn new(theta_x: f64, theta_y: f64, theta_z: f64) -> Result<Self> {
        for (name, a) in [("theta_x", theta_x), ("theta_y", theta_y), ("theta_z", theta_z)] {
            if !a.is_finite() {
                return Err(Error::Data(format!("pose angle {name} is not finite")));
            }
        }
        Ok(Self { theta_x: wrap_angle(theta_x), theta_y: wrap_angle(theta_y), theta_z: wrap_angle(theta_z) })
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.theta_x, self.theta_y, self.theta_z]
    }

    pub fn from_array(a: [f64; 3]) -> Result<Self> {
        Self::new(a[0], a[1], a[2])
    }
}

/// `sin`/`cos` that are exact at integer multiples of pi/2, so axis-aligned
/// quarter turns map voxel centres onto voxel centres without round-off.
fn sincos(a: f64) -> (f64, f64) {
    let k = a / FRAC_PI_2;
    let r = k.round();
    if (k - r).abs() < 1e-12 {
        return match (r as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        };
    }
    a.sin_cos()
}

fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Per-axis rotations and their angle derivatives.
fn axis_mats(pose: &ViewPose) -> ([Mat3; 3], [Mat3; 3]) {
    let (sx, cx) = sincos(pose.theta_x);
    let (sy, cy) = sincos(pose.theta_y);
    let (sz, cz) = sincos(pose.theta_z);
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    let dx = [[0.0, 0.0, 0.0], [0.0, -sx, -cx], [0.0, cx, -sx]];
    let dy = [[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]];
    let dz = [[-sz, -cz, 0.0], [cz, -sz, 0.0], [0.0, 0.0, 0.0]];
    ([rx, ry, rz], [dx, dy, dz])
}

pub fn pose_to_rotation(pose: &ViewPose) -> Mat3 {
    let ([rx, ry, rz], _) = axis_mats(pose);
    matmul3(&rz, &matmul3(&ry, &rx))
}

/// `dR / d theta_{x,y,z}`.
pub fn rotation_jacobian(pose: &ViewPose) -> [Mat3; 3] {
    let ([rx, ry, rz], [dx, dy, dz]) = axis_mats(pose);
    [
        matmul3(&rz, &matmul3(&ry, &dx)),
        matmul3(&rz, &matmul3(&dy, &rx)),
        matmul3(&dz, &matmul3(&ry, &rx)),
    ]
}

/// Dense `[C, D, H, W]` grid with `D = H = W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid3D(Tensor);

impl FeatureGrid3D {
    pub fn new(t: Tensor) -> Result<Self> {
        check_cubic(&t.shape()[..], 4)?;
        if !t.is_finite() {
            return Err(Error::Data("feature grid has non-finite entries".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn size(&self) -> usize {
        self.0.shape()[1]
    }
}

fn check_cubic(shape: &[usize], rank: usize) -> Result<usize> {
    if shape.len() != rank {
        return Err(Error::Shape(format!("expected a rank-{rank} grid, got {shape:?}")));
    }
    let s = &shape[rank - 3..];
    if s[0] != s[1] || s[1] != s[2] {
        return Err(Error::Shape(format!("grid is not cubic: {shape:?}")));
    }
    Ok(s[0])
}

/// Trilinear taps of one output voxel: flat input index, weight, and the
/// weight's gradient with respect to the sample position (x, y, z).
struct Taps {
    idx: [usize; 8],
    w: [f64; 8],
    dw: [[f64; 3]; 8],
    count: usize,
}

fn taps(q: [f64; 3], s: usize) -> Taps {
    let mut t = Taps { idx: [0; 8], w: [0.0; 8], dw: [[0.0; 3]; 8], count: 0 };
    let f = q.map(|v| v.floor());
    let fr = [q[0] - f[0], q[1] - f[1], q[2] - f[2]];
    for corner in 0..8 {
        let bit = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut pos = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let p = f[a] as i64 + bit[a] as i64;
            if p < 0 || p >= s as i64 {
                inside = false;
                break;
            }
            pos[a] = p as usize;
        }
        if !inside {
            continue;
        }
        let lin = |a: usize| if bit[a] == 1 { fr[a] } else { 1.0 - fr[a] };
        let dlin = |a: usize| if bit[a] == 1 { 1.0 } else { -1.0 };
        let (lx, ly, lz) = (lin(0), lin(1), lin(2));
        let w = lx * ly * lz;
        // Zero-weight taps still carry position gradients; keep them.
        let k = t.count;
        t.idx[k] = (pos[2] * s + pos[1]) * s + pos[0];
        t.w[k] = w;
        t.dw[k] = [dlin(0) * ly * lz, lx * dlin(1) * lz, lx * ly * dlin(2)];
        t.count += 1;
    }
    t
}

/// Sample position (index space, x/y/z order) for output voxel `(d, h, w)`.
fn source_position(rt: &Mat3, s: usize, d: usize, h: usize, w: usize) -> ([f64; 3], [f64; 3]) {
    let c = (s as f64 - 1.0) / 2.0;
    let o = [w as f64 - c, h as f64 - c, d as f64 - c];
    let mut q = [0.0; 3];
    for i in 0..3 {
        q[i] = rt[i][0] * o[0] + rt[i][1] * o[1] + rt[i][2] * o[2] + c;
    }
    (q, o)
}

fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

/// Rotates a batch of cubic grids `[N, C, S, S, S]` by per-sample poses
/// `[N, 3]` (theta_x, theta_y, theta_z). Differentiable in both inputs.
pub fn rotate_grid_batch<'g>(grid: &Var<'g>, poses: &Var<'g>) -> Result<Var<'g>> {
    let x = grid.value();
    let s = check_cubic(x.shape(), 5)?;
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let p = poses.value();
    if p.shape() != [n, 3] {
        return Err(Error::Shape(format!("poses must be [{n}, 3], got {:?}", p.shape())));
    }
    let vox = s * s * s;
    let pose_of = |i: usize| ViewPose {
        theta_x: p.data()[3 * i],
        theta_y: p.data()[3 * i + 1],
        theta_z: p.data()[3 * i + 2],
    };

    let mut out = vec![0.0; n * c * vox];
    let mut all_taps = Vec::with_capacity(n);
    for i in 0..n {
        let rt = transpose(&pose_to_rotation(&pose_of(i)));
        let mut sample_taps = Vec::with_capacity(vox);
        for d in 0..s {
            for h in 0..s {
                for w in 0..s {
                    let (q, _) = source_position(&rt, s, d, h, w);
                    sample_taps.push(taps(q, s));
                }
            }
        }
        for ch in 0..c {
            let src = &x.data()[(i * c + ch) * vox..(i * c + ch + 1) * vox];
            let dst = &mut out[(i * c + ch) * vox..(i * c + ch + 1) * vox];
            for (v, t) in sample_taps.iter().enumerate() {
                dst[v] = (0..t.count).map(|k| t.w[k] * src[t.idx[k]]).sum();
            }
        }
        all_taps.push(sample_taps);
    }
    let poses_saved: Vec<ViewPose> = (0..n).map(pose_of).collect();

    Ok(grid.graph().custom(&[*grid, *poses], Tensor::new(x.shape(), out), move |ctx| {
        let (x, g) = (ctx.input(0), ctx.grad.data());
        let mut dgrid = ctx.needs(0).then(|| vec![0.0; n * c * vox]);
        let mut dpose = ctx.needs(1).then(|| vec![0.0; n * 3]);
        for i in 0..n {
            let sample_taps = &all_taps[i];
            if let Some(dg) = dgrid.as_mut() {
                for ch in 0..c {
                    let go = &g[(i * c + ch) * vox..(i * c + ch + 1) * vox];
                    let dst = &mut dg[(i * c + ch) * vox..(i * c + ch + 1) * vox];
                    for (v, t) in sample_taps.iter().enumerate() {
                        for k in 0..t.count {
                            dst[t.idx[k]] += t.w[k] * go[v];
                        }
                    }
                }
            }
            if let Some(dp) = dpose.as_mut() {
                let jac = rotation_jacobian(&poses_saved[i]);
                let mut v = 0;
                for d in 0..s {
                    for h in 0..s {
                        for w in 0..s {
                            let t = &sample_taps[v];
                            let mut dq = [0.0; 3];
                            for ch in 0..c {
                                let go = g[(i * c + ch) * vox + v];
                                if go == 0.0 {
                                    continue;
                                }
                                let src = &x.data()[(i * c + ch) * vox..(i * c + ch + 1) * vox];
                                for k in 0..t.count {
                                    let val = go * src[t.idx[k]];
                                    for a in 0..3 {
                                        dq[a] += t.dw[k][a] * val;
                                    }
                                }
                            }
                            let cen = (s as f64 - 1.0) / 2.0;
                            let o = [w as f64 - cen, h as f64 - cen, d as f64 - cen];
                            for (axis, j) in jac.iter().enumerate() {
                                // q = R^T o  =>  dq/dtheta = (dR/dtheta)^T o
                                let mut acc = 0.0;
                                for r in 0..3 {
                                    let dqr = j[0][r] * o[0] + j[1][r] * o[1] + j[2][r] * o[2];
                                    acc += dq[r] * dqr;
                                }
                                dp[3 * i + axis] += acc;
                            }
                            v += 1;
                        }
                    }
                }
            }
        }
        vec![dgrid.map(|d| Tensor::new(x.shape(), d)), dpose.map(|d| Tensor::new(&[n, 3], d))]
    }))
}

/// Rotates a single grid.
pub fn rotate_grid(grid: &FeatureGrid3D, pose: &ViewPose) -> Result<FeatureGrid3D> {
    let g = fbnet_autograd::Graph::new();
    let t = grid.tensor();
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    let x = g.constant(t.clone().reshape(&shape));
    let p = g.constant(Tensor::new(&[1, 3], pose.to_array().to_vec()));
    let y = rotate_grid_batch(&x, &p)?;
    FeatureGrid3D::new((*y.value()).clone().reshape(t.shape()))
}

/// Closed angle intervals per rotation axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseRanges {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
}

impl PoseRanges {
    pub fn from_config(cfg: &Config) -> Self {
        Self { x: cfg.elevation_range, y: cfg.azimuth_range, z: cfg.roll_range }
    }

    pub fn fixed(pose: ViewPose) -> Self {
        Self { x: [pose.theta_x; 2], y: [pose.theta_y; 2], z: [pose.theta_z; 2] }
    }
}

/// Independent uniform draw per axis.
pub fn sample_pose(ranges: &PoseRanges, rng: &mut Stream) -> Result<ViewPose> {
    let mut a = [0.0; 3];
    for (k, (name, [lo, hi])) in [("x", ranges.x), ("y", ranges.y), ("z", ranges.z)].into_iter().enumerate() {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::config(format!("pose range {name}"), format!("empty interval [{lo}, {hi}]")));
        }
        if lo < -PI || hi > PI {
            return Err(Error::config(format!("pose range {name}"), format!("[{lo}, {hi}] exceeds [-pi, pi]")));
        }
        a[k] = rng::uniform(rng, lo, hi);
    }
    ViewPose::from_array(a)
}
