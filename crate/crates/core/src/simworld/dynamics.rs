use crate::error::{Error, Result};

use super::kinematics::fk_chain;
use super::{Door, EmbodimentKind, Grasp, Pose, SimState, DELTA_MAX, EE_RADIUS, GRASP_RADIUS, LIFT_PER_STEP, MAX_LIFT};

/// Interpolation points per step for contact resolution.
const SUBSTEPS: usize = 5;
/// How far the door can swing open.
const DOOR_MIN_ANGLE: f64 = -1.75;

fn arm_pose(state: &SimState, joints: &[f64]) -> Pose {
    let emb = state.embodiment();
    let (pts, th) = fk_chain(emb.bases[0], 0.0, &emb.links, joints);
    let p = pts[emb.links.len()];
    Pose { x: p[0], y: p[1], theta: th }
}

/// Advances the simulation by one control period.
///
/// Arm actions are three joint deltas and a gripper command (> 0.5 closes);
/// hand actions are six joint deltas. Deltas are clamped to `DELTA_MAX` and
/// joints to their limits.
pub fn step(state: &SimState, action: &[f64]) -> Result<SimState> {
    let emb = state.embodiment();
    if action.len() != emb.action_dim() {
        return Err(Error::Shape(format!(
            "action of length {} for {} (needs {})",
            action.len(),
            emb.kind.name(),
            emb.action_dim()
        )));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("action contains a non-finite value".into()));
    }
    let mut next = state.clone();
    next.step += 1;
    next.clamped = false;
    let n = emb.n_joints();
    for (j, q) in next.joints.iter_mut().enumerate() {
        let d = action[j].clamp(-DELTA_MAX, DELTA_MAX);
        let (lo, hi) = emb.joint_limit(j);
        let moved = *q + d;
        if moved < lo || moved > hi {
            next.clamped = true;
        }
        *q = moved.clamp(lo, hi);
    }
    if emb.kind == EmbodimentKind::Fingers {
        return Ok(next);
    }

    // Sweep the end-effector through the step to resolve contacts.
    let mut prev = arm_pose(state, &state.joints);
    for s in 1..=SUBSTEPS {
        let f = s as f64 / SUBSTEPS as f64;
        let q: Vec<f64> = (0..n).map(|j| state.joints[j] + f * (next.joints[j] - state.joints[j])).collect();
        let pose = arm_pose(state, &q);
        push_objects(&mut next, pose.xy());
        if let Some(door) = next.door.as_mut() {
            push_door(door, prev.xy(), pose.xy());
        }
        prev = pose;
    }
    let ee = prev;

    let closing = action[3] > 0.5;
    let was_open = state.gripper > 0.5;
    next.gripper = if closing { 0.0 } else { 1.0 };
    if !closing {
        if let Some(g) = next.held.take() {
            next.objects[g.object].z = 0.0;
        }
    } else if next.held.is_none() && was_open {
        let nearest = next
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.graspable)
            .map(|(i, o)| (i, ee.dist(o.pos)))
            .filter(|&(_, d)| d <= GRASP_RADIUS)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, _)) = nearest {
            let o = &next.objects[i];
            let local = ee.inverse_apply(o.pos);
            next.held = Some(Grasp {
                object: i,
                offset: [local[0], local[1], o.theta - ee.theta],
            });
        }
    } else if let Some(g) = next.held {
        let o = &mut next.objects[g.object];
        o.z = (o.z + LIFT_PER_STEP).min(MAX_LIFT);
    }
    if let Some(g) = next.held {
        let o = &mut next.objects[g.object];
        o.pos = ee.apply([g.offset[0], g.offset[1]]);
        o.theta = ee.theta + g.offset[2];
    }
    Ok(next)
}

/// Moves overlapping pushable objects out along the contact normal.
fn push_objects(state: &mut SimState, ee: [f64; 2]) {
    let held = state.held.map(|g| g.object);
    for (i, o) in state.objects.iter_mut().enumerate() {
        if !o.pushable || Some(i) == held {
            continue;
        }
        let (dx, dy) = (o.pos[0] - ee[0], o.pos[1] - ee[1]);
        let d = dx.hypot(dy);
        let reach = o.radius + EE_RADIUS;
        if d < reach && d > 1e-12 {
            let depth = reach - d;
            o.pos[0] += dx / d * depth;
            o.pos[1] += dy / d * depth;
        }
    }
}

/// Angular clearance the door needs from a contact circle at hinge radius `r`.
fn door_clearance(door: &Door, r: f64) -> Option<f64> {
    let l = door.length;
    if r > l + EE_RADIUS {
        return None;
    }
    if r <= EE_RADIUS {
        return Some(std::f64::consts::FRAC_PI_2);
    }
    Some(if r <= l {
        (EE_RADIUS / r).asin()
    } else {
        ((r * r + l * l - EE_RADIUS * EE_RADIUS) / (2.0 * r * l)).clamp(-1.0, 1.0).acos()
    })
}

/// Rotates the door out of the contact circle, toward closed if the
/// effector came from the outer face, toward open otherwise.
fn push_door(door: &mut Door, prev: [f64; 2], ee: [f64; 2]) {
    let (r, phi) = door.polar(ee);
    let Some(clear) = door_clearance(door, r) else {
        return;
    };
    let (_, prev_phi) = door.polar(prev);
    let outer = prev_phi < door.angle;
    if outer && door.angle < phi + clear {
        door.angle = (phi + clear).min(0.0);
    } else if !outer && door.angle > phi - clear {
        door.angle = (phi - clear).max(DOOR_MIN_ANGLE);
    }
}
