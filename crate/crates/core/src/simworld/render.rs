use serde::{Deserialize, Serialize};

use crate::image::RgbImage;

use super::kinematics::fk_chain;
use super::{EmbodimentKind, Pose, SimState};

pub const RENDER_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Camera {
    /// Mounted on the end-effector for the arm; a close fixed view for the hand.
    Wrist,
    /// Fixed view over the whole workspace.
    Third,
}

impl std::str::FromStr for Camera {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "wrist" => Ok(Camera::Wrist),
            "third" | "third-person" => Ok(Camera::Third),
            _ => Err(crate::error::Error::InvalidArgument(format!("unknown camera `{s}`"))),
        }
    }
}

const BACKGROUNDS: [[u8; 3]; 6] = [
    [200, 196, 186],
    [176, 188, 196],
    [190, 200, 178],
    [206, 186, 180],
    [170, 170, 172],
    [214, 204, 160],
];
const DOOR_COLOR: [u8; 3] = [120, 78, 40];
const HINGE_COLOR: [u8; 3] = [60, 60, 60];
const GOAL_COLOR: [u8; 3] = [30, 160, 60];
const JAW_COLOR: [u8; 3] = [40, 40, 48];
const FINGER_COLOR: [u8; 3] = [150, 120, 110];
const TIP_COLOR: [u8; 3] = [90, 60, 60];

pub fn background_color(seed: u32) -> [u8; 3] {
    BACKGROUNDS[seed as usize % BACKGROUNDS.len()]
}

/// View window in world coordinates: `pose` is the window center with the
/// image's up direction along the pose heading.
#[derive(Debug, Clone, Copy)]
struct View {
    pose: Pose,
    size: f64,
}

impl View {
    fn world(&self, col: usize, row: usize) -> [f64; 2] {
        let n = RENDER_SIZE as f64;
        let u = (col as f64 + 0.5) / n * self.size - self.size / 2.0;
        let v = self.size / 2.0 - (row as f64 + 0.5) / n * self.size;
        // image right is the frame's -y side when up is +x
        self.pose.apply([v, -u])
    }
}

/// Window of the wrist camera: 0.32 m wide, centered 0.15 m ahead of the
/// gripper and rotating with it.
pub(crate) const WRIST_WINDOW: f64 = 0.32;
pub(crate) const WRIST_AHEAD: f64 = 0.15;

fn view(state: &SimState, camera: Camera) -> View {
    match (state.task.embodiment_kind(), camera) {
        (EmbodimentKind::Arm3, Camera::Wrist) => {
            let ee = state.ee();
            View {
                pose: Pose {
                    x: ee.x + WRIST_AHEAD * ee.theta.cos(),
                    y: ee.y + WRIST_AHEAD * ee.theta.sin(),
                    theta: ee.theta,
                },
                size: WRIST_WINDOW,
            }
        }
        (EmbodimentKind::Arm3, Camera::Third) => View {
            pose: Pose { x: 0.0, y: 0.5, theta: std::f64::consts::FRAC_PI_2 },
            size: 0.6,
        },
        (EmbodimentKind::Fingers, Camera::Wrist) => View {
            pose: Pose { x: 0.0, y: 0.075, theta: std::f64::consts::FRAC_PI_2 },
            size: 0.2,
        },
        (EmbodimentKind::Fingers, Camera::Third) => View {
            pose: Pose { x: 0.0, y: 0.06, theta: std::f64::consts::FRAC_PI_2 },
            size: 0.36,
        },
    }
}

fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

enum Prim {
    /// Filled shape: center, rotation, radius.
    Shape(super::Shape, [f64; 2], f64, f64),
    Capsule([f64; 2], [f64; 2], f64),
    Disk([f64; 2], f64),
    Annulus([f64; 2], f64, f64),
}

impl Prim {
    fn hit(&self, p: [f64; 2]) -> bool {
        match *self {
            Prim::Shape(shape, c, theta, r) => {
                let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
                if dx.abs() > r || dy.abs() > r {
                    return false;
                }
                let (s, co) = theta.sin_cos();
                let (u, v) = ((co * dx + s * dy) / r, (-s * dx + co * dy) / r);
                shape.contains(u, v)
            }
            Prim::Capsule(a, b, w) => seg_dist(p, a, b) <= w,
            Prim::Disk(c, r) => (p[0] - c[0]).hypot(p[1] - c[1]) <= r,
            Prim::Annulus(c, r0, r1) => {
                let d = (p[0] - c[0]).hypot(p[1] - c[1]);
                (r0..=r1).contains(&d)
            }
        }
    }
}

fn scene(state: &SimState, camera: Camera) -> Vec<(Prim, [u8; 3])> {
    let mut prims = Vec::new();
    if let Some(g) = state.goal {
        prims.push((Prim::Annulus(g, 0.012, 0.02), GOAL_COLOR));
    }
    if let Some(d) = &state.door {
        prims.push((Prim::Capsule(d.hinge, d.tip(), 0.008), DOOR_COLOR));
        prims.push((Prim::Disk(d.hinge, 0.012), HINGE_COLOR));
    }
    let mut order: Vec<usize> = (0..state.objects.len()).collect();
    order.sort_by(|&a, &b| state.objects[a].z.total_cmp(&state.objects[b].z));
    for i in order {
        let o = &state.objects[i];
        // lifted objects appear larger from above
        let r = o.radius * (1.0 + 3.0 * o.z);
        prims.push((Prim::Shape(o.shape, o.pos, o.theta, r), o.color));
    }
    match state.task.embodiment_kind() {
        EmbodimentKind::Arm3 => {
            if camera == Camera::Wrist {
                let ee = state.ee();
                let open = 0.008 + 0.012 * state.gripper;
                for side in [-1.0, 1.0] {
                    let a = ee.apply([-0.012, side * open]);
                    let b = ee.apply([0.012, side * open]);
                    prims.push((Prim::Capsule(a, b, 0.004), JAW_COLOR));
                }
            }
        }
        EmbodimentKind::Fingers => {
            let emb = state.embodiment();
            let n = emb.links.len();
            for (f, &base) in emb.bases.iter().enumerate() {
                let (pts, _) = fk_chain(base, std::f64::consts::FRAC_PI_2, &emb.links, &state.joints[f * n..(f + 1) * n]);
                for w in pts.windows(2) {
                    prims.push((Prim::Capsule(w[0], w[1], 0.007), FINGER_COLOR));
                }
                prims.push((Prim::Disk(pts[n], 0.006), TIP_COLOR));
            }
        }
    }
    prims
}

/// Rasterizes the scene as seen from `camera` into a 64x64 RGB image.
pub fn render(state: &SimState, camera: Camera) -> RgbImage {
    let v = view(state, camera);
    let prims = scene(state, camera);
    let mut img = RgbImage::filled(RENDER_SIZE, RENDER_SIZE, background_color(state.background));
    for row in 0..RENDER_SIZE {
        for col in 0..RENDER_SIZE {
            let p = v.world(col, row);
            if let Some((_, c)) = prims.iter().rev().find(|(prim, _)| prim.hit(p)) {
                img.set_pixel(col, row, *c);
            }
        }
    }
    img
}
