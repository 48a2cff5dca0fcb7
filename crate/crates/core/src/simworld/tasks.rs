use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::kinematics::{chain_jacobian, dls_step, fk_chain, wrap_angle};
use super::{
    Door, Embodiment, EmbodimentKind, Object, Pose, Shape, SimState, TaskId, DELTA_MAX, DOOR_TOL_DEG, EE_RADIUS, HAND_TOL, K,
    LIFT_HEIGHT, PUSH_TOL, REACH_TOL,
};

/// The middle finger is the one that must touch the object.
pub(crate) const INDEX_FINGER: usize = 1;

/// End-effector position of the arm's home pose, pointing along +y.
pub const ARM_HOME: [f64; 2] = [0.0, 0.45];
/// Fingertip-retracted hand pose.
const HAND_REST: [f64; 6] = [0.0, 2.4, 0.0, 2.4, 0.0, 2.4];
const RESET_JITTER: f64 = 0.05;

const LATTICE_X: [f64; 4] = [-0.12, -0.04, 0.04, 0.12];
const LATTICE_Y: [f64; 4] = [0.52, 0.56, 0.60, 0.64];
const PUSH_X: [f64; 4] = [-0.1, -0.1 / 3.0, 0.1 / 3.0, 0.1];
const PUSH_Y: [f64; 4] = [0.52, 0.54, 0.56, 0.58];
const PUSH_DIST: f64 = 0.1;
const PUSH_MAX_ANGLE: f64 = 0.35;
const HAND_X: [f64; 4] = [-0.05, -0.05 / 3.0, 0.05 / 3.0, 0.05];
const HAND_Y: [f64; 4] = [0.07, 0.085, 0.10, 0.115];
const DOOR_HINGE: [f64; 2] = [-0.16, 0.62];
const DOOR_LENGTH: f64 = 0.14;
const DOOR_OPEN_MIN: f64 = 20.0;
const DOOR_OPEN_MAX: f64 = 50.0;

const RED: [u8; 3] = [210, 40, 40];
const WOOD: [u8; 3] = [160, 110, 60];
const YELLOW: [u8; 3] = [235, 205, 40];

/// Fruit-like object types of the multi-object pick task.
pub const PICK_TYPES: [(Shape, [u8; 3]); 8] = [
    (Shape::Circle, [200, 30, 40]),
    (Shape::Ellipse, [240, 210, 60]),
    (Shape::Circle, [245, 140, 30]),
    (Shape::Hexagon, [120, 50, 140]),
    (Shape::Diamond, [60, 170, 60]),
    (Shape::Star, [230, 110, 160]),
    (Shape::Pentagon, [120, 80, 40]),
    (Shape::Crescent, [170, 220, 60]),
];

fn shape_color(i: usize) -> [u8; 3] {
    const P: [[u8; 3]; 8] = [
        [200, 50, 50],
        [50, 90, 200],
        [40, 150, 70],
        [210, 150, 30],
        [140, 60, 160],
        [30, 150, 160],
        [110, 110, 110],
        [190, 90, 40],
    ];
    P[i % 8]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variation {
    /// Evaluation grid cell in `[0, K)`.
    Grid(usize),
    /// Object and robot placement drawn from the task ranges.
    Random,
}

/// Analytic inverse kinematics of the arm for a pose, elbow on the right.
pub(crate) fn arm_ik(target: Pose) -> [f64; 3] {
    let emb = Embodiment::arm3();
    let (l1, l2, l3) = (emb.links[0], emb.links[1], emb.links[2]);
    let wx = target.x - l3 * target.theta.cos();
    let wy = target.y - l3 * target.theta.sin();
    let c2 = ((wx * wx + wy * wy - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let q2 = -c2.acos();
    let q1 = wy.atan2(wx) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
    [wrap_angle(q1), q2, wrap_angle(target.theta - q1 - q2)]
}

pub fn arm_home_joints() -> Vec<f64> {
    arm_ik(Pose { x: ARM_HOME[0], y: ARM_HOME[1], theta: FRAC_PI_2 }).to_vec()
}

fn block(shape: Shape, color: [u8; 3], pos: [f64; 2], radius: f64) -> Object {
    Object {
        shape,
        color,
        pos,
        theta: 0.0,
        radius,
        z: 0.0,
        pushable: false,
        graspable: false,
    }
}

fn lattice(xs: &[f64; 4], ys: &[f64; 4], i: usize) -> [f64; 2] {
    [xs[i % 4], ys[i / 4]]
}

fn uniform_in(rng: &mut impl Rng, xs: &[f64; 4], ys: &[f64; 4]) -> [f64; 2] {
    [rng.random_range(xs[0]..=xs[3]), rng.random_range(ys[0]..=ys[3])]
}

fn base_state(task: TaskId, variation: Option<usize>, joints: Vec<f64>) -> SimState {
    SimState {
        task,
        variation,
        joints,
        gripper: 1.0,
        objects: Vec::new(),
        target: 0,
        goal: None,
        door: None,
        held: None,
        background: 0,
        step: 0,
        clamped: false,
    }
}

/// Seeded distractors at least 5 cm from each other and from `avoid`.
fn distractors(rng: &mut impl Rng, avoid: [f64; 2]) -> Vec<Object> {
    let n = rng.random_range(4..=7);
    let mut placed: Vec<[f64; 2]> = vec![avoid];
    let mut out = Vec::new();
    while out.len() < n {
        let p = [rng.random_range(-0.2..=0.2), rng.random_range(0.46..=0.72)];
        if placed.iter().any(|q| (p[0] - q[0]).hypot(p[1] - q[1]) < 0.05) {
            continue;
        }
        placed.push(p);
        let shape = Shape::ALL[[0, 2, 3, 4, 5, 6, 7, 8][rng.random_range(0..8)]];
        let color = shape_color(rng.random_range(0..8));
        let mut o = block(shape, color, p, 0.018);
        o.theta = rng.random_range(0.0..std::f64::consts::TAU);
        o.graspable = true;
        out.push(o);
    }
    out
}

fn build(task: TaskId, variation: Variation, rng: &mut ChaCha8Rng) -> SimState {
    let grid = match variation {
        Variation::Grid(i) => Some(i),
        Variation::Random => None,
    };
    let jitter = |rng: &mut ChaCha8Rng, q: &[f64]| -> Vec<f64> {
        q.iter()
            .map(|v| if grid.is_some() { *v } else { v + rng.random_range(-RESET_JITTER..=RESET_JITTER) })
            .collect()
    };
    match task {
        TaskId::Reach | TaskId::Pick | TaskId::PickMulti | TaskId::PickClutter => {
            let joints = jitter(rng, &arm_home_joints());
            let mut s = base_state(task, grid, joints);
            let pos = match grid {
                Some(i) => lattice(&LATTICE_X, &LATTICE_Y, i),
                None => uniform_in(rng, &LATTICE_X, &LATTICE_Y),
            };
            let mut o = match task {
                TaskId::Reach => block(Shape::Square, RED, pos, 0.02),
                TaskId::PickMulti => {
                    let t = grid.map(|i| i % 8).unwrap_or_else(|| rng.random_range(0..8));
                    block(PICK_TYPES[t].0, PICK_TYPES[t].1, pos, 0.02)
                }
                _ => block(Shape::Square, YELLOW, pos, 0.02),
            };
            o.graspable = task != TaskId::Reach;
            s.objects.push(o);
            if task == TaskId::PickClutter {
                let extra = match grid {
                    Some(i) => distractors(&mut ChaCha8Rng::seed_from_u64(0xc1u64 << 8 | i as u64), pos),
                    None => distractors(rng, pos),
                };
                s.objects.extend(extra);
            }
            s
        }
        TaskId::Push => {
            let joints = jitter(rng, &arm_home_joints());
            let mut s = base_state(task, grid, joints);
            let (pos, angle) = match grid {
                Some(i) => (lattice(&PUSH_X, &PUSH_Y, i), 0.0),
                None => (uniform_in(rng, &PUSH_X, &PUSH_Y), rng.random_range(-PUSH_MAX_ANGLE..=PUSH_MAX_ANGLE)),
            };
            let mut o = block(Shape::Square, WOOD, pos, 0.02);
            o.pushable = true;
            s.objects.push(o);
            s.goal = Some([pos[0] + PUSH_DIST * angle.sin(), pos[1] + PUSH_DIST * angle.cos()]);
            s
        }
        TaskId::CloseDoor => {
            let joints = jitter(rng, &arm_home_joints());
            let mut s = base_state(task, grid, joints);
            let (mirrored, open_deg) = match grid {
                Some(i) => (
                    i >= 8,
                    DOOR_OPEN_MIN + (i % 8) as f64 * (DOOR_OPEN_MAX - DOOR_OPEN_MIN) / 7.0,
                ),
                None => (rng.random_bool(0.5), rng.random_range(DOOR_OPEN_MIN..=DOOR_OPEN_MAX)),
            };
            let hinge = if mirrored { [-DOOR_HINGE[0], DOOR_HINGE[1]] } else { DOOR_HINGE };
            s.door = Some(Door {
                hinge,
                length: DOOR_LENGTH,
                angle: -open_deg.to_radians(),
                mirrored,
            });
            s
        }
        TaskId::HandReach => {
            let joints = jitter(rng, &HAND_REST);
            let mut s = base_state(task, grid, joints);
            let (pos, shape) = match grid {
                Some(i) => (lattice(&HAND_X, &HAND_Y, i), i),
                // training draws only the first eight (seen) shapes
                None => (uniform_in(rng, &HAND_X, &HAND_Y), rng.random_range(0..8)),
            };
            s.objects.push(block(Shape::ALL[shape], shape_color(shape), pos, 0.012));
            s
        }
    }
}

/// Initial state of `task`. Grid variations put the robot at the center of
/// its randomization range and the object at grid cell `id`; random ones
/// sample both from the task ranges and never start in the success region.
pub fn reset(task: TaskId, variation: Variation, seed: u64) -> Result<SimState> {
    if let Variation::Grid(i) = variation {
        if i >= K {
            return Err(Error::InvalidArgument(format!("variation {i} outside [0, {K})")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let s = build(task, variation, &mut rng);
        if !success(&s) {
            return Ok(s);
        }
    }
}

pub fn success(state: &SimState) -> bool {
    match state.task {
        TaskId::Reach => state.ee().dist(state.target_object().pos) < REACH_TOL,
        TaskId::Push => state
            .goal
            .is_some_and(|g| (state.target_object().pos[0] - g[0]).hypot(state.target_object().pos[1] - g[1]) < PUSH_TOL),
        TaskId::Pick | TaskId::PickMulti | TaskId::PickClutter => {
            state.held.is_some_and(|g| g.object == state.target) && state.target_object().z >= LIFT_HEIGHT - 1e-9
        }
        TaskId::CloseDoor => state.door.as_ref().is_some_and(|d| d.angle.abs().to_degrees() < DOOR_TOL_DEG),
        TaskId::HandReach => state.ee().dist(state.target_object().pos) < HAND_TOL,
    }
}

const EXPERT_GAIN: f64 = 0.6;
const DAMPING: f64 = 0.02;
/// Meters of task-space error per radian of heading error.
const HEADING_WEIGHT: f64 = 0.15;

fn limit(mut dq: Vec<f64>) -> Vec<f64> {
    let m = dq.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > DELTA_MAX {
        dq.iter_mut().for_each(|v| *v *= DELTA_MAX / m);
    }
    dq
}

/// Joint deltas that move the arm's end-effector toward `target`.
pub fn arm_delta(joints: &[f64], target: Pose, gain: f64) -> Vec<f64> {
    let emb = Embodiment::arm3();
    let (pts, th) = fk_chain(emb.bases[0], 0.0, &emb.links, joints);
    let ee = pts[3];
    let [jx, jy, jt] = chain_jacobian(0.0, &emb.links, joints);
    let jt: Vec<f64> = jt.iter().map(|v| v * HEADING_WEIGHT).collect();
    let err = [
        target.x - ee[0],
        target.y - ee[1],
        HEADING_WEIGHT * wrap_angle(target.theta - th),
    ];
    limit(dls_step(&[jx, jy, jt], &err, DAMPING).into_iter().map(|v| v * gain).collect())
}

/// Joint deltas moving one finger's tip toward `target`.
fn finger_delta(emb: &Embodiment, joints: &[f64], finger: usize, target: [f64; 2]) -> Vec<f64> {
    let n = emb.links.len();
    let q = &joints[finger * n..(finger + 1) * n];
    let (pts, _) = fk_chain(emb.bases[finger], FRAC_PI_2, &emb.links, q);
    let [jx, jy, _] = chain_jacobian(FRAC_PI_2, &emb.links, q);
    let err = [target[0] - pts[n][0], target[1] - pts[n][1]];
    let d = limit(dls_step(&[jx, jy], &err, DAMPING).into_iter().map(|v| v * EXPERT_GAIN).collect());
    let mut out = vec![0.0; emb.n_joints()];
    out[finger * n..(finger + 1) * n].copy_from_slice(&d);
    out
}

fn down(x: f64, y: f64) -> Pose {
    Pose { x, y, theta: FRAC_PI_2 }
}

fn door_waypoint(door: &Door, ee: [f64; 2]) -> [f64; 2] {
    let (r, phi) = door.polar(ee);
    let a = door.angle;
    let rc = 0.65 * door.length;
    let beta = ((EE_RADIUS + 0.012) / rc).asin();
    if phi < a && r < door.length + 0.01 && a - phi < beta + 0.35 {
        door.from_polar(rc, 0.15)
    } else if phi < a - 0.05 {
        door.from_polar(rc, a - beta)
    } else {
        door.from_polar(door.length + 0.04, a - 0.4)
    }
}

fn push_waypoint(obj: &Object, goal: [f64; 2], ee: [f64; 2]) -> [f64; 2] {
    let (gx, gy) = (goal[0] - obj.pos[0], goal[1] - obj.pos[1]);
    let gl = gx.hypot(gy).max(1e-9);
    let dir = [gx / gl, gy / gl];
    let reach = obj.radius + EE_RADIUS;
    let rel = [ee[0] - obj.pos[0], ee[1] - obj.pos[1]];
    let along = rel[0] * dir[0] + rel[1] * dir[1];
    let lateral = (rel[0] * dir[1] - rel[1] * dir[0]).abs();
    if along < 0.0 && along > -(reach + 0.035) && lateral < 0.012 {
        [goal[0] - dir[0] * (reach - 0.004), goal[1] - dir[1] * (reach - 0.004)]
    } else {
        [obj.pos[0] - dir[0] * (reach + 0.02), obj.pos[1] - dir[1] * (reach + 0.02)]
    }
}

/// Noise-free scripted action: waypoint following through damped
/// least-squares inverse kinematics, clamped to `DELTA_MAX`.
pub fn expert_action(state: &SimState) -> Result<Vec<f64>> {
    let emb = state.embodiment();
    if success(state) && state.task != TaskId::Pick && state.task != TaskId::PickMulti && state.task != TaskId::PickClutter {
        return Ok(vec![0.0; emb.action_dim()]);
    }
    if emb.kind == EmbodimentKind::Fingers {
        let target = state.target_object().pos;
        let base = emb.bases[INDEX_FINGER];
        let span: f64 = emb.links.iter().sum();
        if (target[0] - base[0]).hypot(target[1] - base[1]) > span {
            return Err(Error::InvalidArgument(format!("object at {target:?} is out of finger reach")));
        }
        return Ok(finger_delta(&emb, &state.joints, INDEX_FINGER, target));
    }
    let ee = state.ee();
    let (waypoint, close) = match state.task {
        TaskId::Reach => (state.target_object().pos, false),
        TaskId::Push => (push_waypoint(state.target_object(), state.goal.unwrap_or(ARM_HOME), ee.xy()), false),
        TaskId::CloseDoor => {
            let door = state.door.as_ref().ok_or_else(|| Error::InvalidArgument("door task without a door".into()))?;
            (door_waypoint(door, ee.xy()), false)
        }
        TaskId::Pick | TaskId::PickMulti | TaskId::PickClutter => {
            let o = state.target_object();
            if state.held.is_some_and(|g| g.object == state.target) {
                return Ok(vec![0.0, 0.0, 0.0, 1.0]);
            }
            if ee.dist(o.pos) < 0.006 {
                return Ok(vec![0.0, 0.0, 0.0, 1.0]);
            }
            (o.pos, false)
        }
        TaskId::HandReach => unreachable!("hand task handled above"),
    };
    let span: f64 = emb.links.iter().sum();
    if waypoint[0].hypot(waypoint[1]) > span - 0.01 {
        return Err(Error::InvalidArgument(format!("waypoint {waypoint:?} is out of arm reach")));
    }
    let mut a = arm_delta(&state.joints, down(waypoint[0], waypoint[1]), EXPERT_GAIN);
    a.push(if close { 1.0 } else { 0.0 });
    Ok(a)
}

/// Scripted expert with optional Gaussian joint noise.
#[derive(Debug, Clone)]
pub struct Expert {
    pub sigma: f64,
    rng: ChaCha8Rng,
}

impl Expert {
    pub fn new(sigma: f64, seed: u64) -> Self {
        Expert {
            sigma,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn act(&mut self, state: &SimState) -> Result<Vec<f64>> {
        let mut a = expert_action(state)?;
        if self.sigma > 0.0 {
            let normal = Normal::new(0.0, self.sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let n = state.embodiment().n_joints();
            for v in a.iter_mut().take(n) {
                *v = (*v + normal.sample(&mut self.rng)).clamp(-DELTA_MAX, DELTA_MAX);
            }
        }
        Ok(a)
    }
}
