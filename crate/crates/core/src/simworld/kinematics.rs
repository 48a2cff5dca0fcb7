use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Embodiment, EmbodimentKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn dist(&self, p: [f64; 2]) -> f64 {
        (self.x - p[0]).hypot(self.y - p[1])
    }

    /// Maps a point given in this frame to world coordinates.
    pub fn apply(&self, local: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * local[0] - s * local[1], self.y + s * local[0] + c * local[1]]
    }

    /// Maps a world point into this frame.
    pub fn inverse_apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}

/// Joint positions of a planar chain: the base followed by every link end.
/// Returns the points and the final heading.
pub fn fk_chain(base: [f64; 2], heading: f64, links: &[f64], joints: &[f64]) -> (Vec<[f64; 2]>, f64) {
    let mut pts = Vec::with_capacity(links.len() + 1);
    let (mut x, mut y, mut th) = (base[0], base[1], heading);
    pts.push([x, y]);
    for (l, q) in links.iter().zip(joints) {
        th += q;
        x += l * th.cos();
        y += l * th.sin();
        pts.push([x, y]);
    }
    (pts, th)
}

fn check_limits(emb: &Embodiment, joints: &[f64]) -> Result<()> {
    if joints.len() != emb.n_joints() {
        return Err(Error::Shape(format!("{} joint angles for {} joints", joints.len(), emb.n_joints())));
    }
    for (j, &q) in joints.iter().enumerate() {
        let (lo, hi) = emb.joint_limit(j);
        if !(lo - 1e-12..=hi + 1e-12).contains(&q) {
            return Err(Error::InvalidArgument(format!("joint {j} at {q} outside [{lo}, {hi}]")));
        }
    }
    Ok(())
}

/// Fingertip poses of the hand; fingers point along +y at zero angles.
pub fn finger_tips(emb: &Embodiment, joints: &[f64]) -> Vec<Pose> {
    let n = emb.links.len();
    emb.bases
        .iter()
        .enumerate()
        .map(|(f, &b)| {
            let (pts, th) = fk_chain(b, std::f64::consts::FRAC_PI_2, &emb.links, &joints[f * n..(f + 1) * n]);
            let tip = pts[n];
            Pose { x: tip[0], y: tip[1], theta: th }
        })
        .collect()
}

/// End-effector pose of the arm (chain along +x at zero angles), or the
/// index fingertip of the hand.
pub fn fk(emb: &Embodiment, joints: &[f64]) -> Result<Pose> {
    check_limits(emb, joints)?;
    Ok(match emb.kind {
        EmbodimentKind::Arm3 => {
            let (pts, th) = fk_chain(emb.bases[0], 0.0, &emb.links, joints);
            let tip = pts[emb.links.len()];
            Pose { x: tip[0], y: tip[1], theta: th }
        }
        EmbodimentKind::Fingers => finger_tips(emb, joints)[super::tasks::INDEX_FINGER],
    })
}

/// Position Jacobian rows `d(x, y)/dq` of a planar chain, plus `dθ/dq`.
pub(crate) fn chain_jacobian(heading: f64, links: &[f64], joints: &[f64]) -> [Vec<f64>; 3] {
    let n = links.len();
    let mut abs = Vec::with_capacity(n);
    let mut th = heading;
    for q in joints {
        th += q;
        abs.push(th);
    }
    let mut jx = vec![0.0; n];
    let mut jy = vec![0.0; n];
    for i in 0..n {
        for j in i..n {
            jx[i] -= links[j] * abs[j].sin();
            jy[i] += links[j] * abs[j].cos();
        }
    }
    [jx, jy, vec![1.0; n]]
}

/// Damped least squares: `J^T (J J^T + λ² I)^-1 e` for a small Jacobian.
pub fn dls_step(jac: &[Vec<f64>], err: &[f64], damping: f64) -> Vec<f64> {
    let m = jac.len();
    let n = jac[0].len();
    let mut a = vec![vec![0.0; m + 1]; m];
    for r in 0..m {
        for c in 0..m {
            a[r][c] = (0..n).map(|k| jac[r][k] * jac[c][k]).sum::<f64>() + if r == c { damping * damping } else { 0.0 };
        }
        a[r][m] = err[r];
    }
    // Gaussian elimination with partial pivoting on the augmented system.
    for col in 0..m {
        let piv = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..m {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=m {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let y: Vec<f64> = (0..m).map(|r| a[r][m] / a[r][r]).collect();
    (0..n).map(|k| (0..m).map(|r| jac[r][k] * y[r]).sum()).collect()
}
