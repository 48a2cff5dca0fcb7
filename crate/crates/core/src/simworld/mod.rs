//! Deterministic top-down planar robot simulator: a 3-joint arm with a
//! 1-DoF gripper and a three-finger hand, kinematic pushing and grasping, a
//! hinged door, wrist and third-person cameras, seven tasks with scripted
//! experts, and the 16-variation evaluation grid.

mod dynamics;
mod kinematics;
mod render;
mod shapes;
mod tasks;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dynamics::step;
pub use kinematics::{dls_step, fk, finger_tips, fk_chain, wrap_angle, Pose};
pub use render::{render, Camera, RENDER_SIZE};
pub use shapes::Shape;
pub use tasks::{arm_delta, expert_action, reset, success, Expert, Variation};

/// Control period in seconds.
pub const DT: f64 = 0.2;
pub const RATE_HZ: f64 = 1.0 / DT;
/// Largest joint displacement per step, radians.
pub const DELTA_MAX: f64 = 0.05;
/// Evaluation grid size.
pub const K: usize = 16;
pub const GRASP_RADIUS: f64 = 0.02;
pub const LIFT_PER_STEP: f64 = 0.02;
pub const LIFT_HEIGHT: f64 = 0.04;
pub const MAX_LIFT: f64 = 0.06;
/// Contact radius of the gripper.
pub const EE_RADIUS: f64 = 0.015;
pub const REACH_TOL: f64 = 0.02;
pub const PUSH_TOL: f64 = 0.03;
pub const DOOR_TOL_DEG: f64 = 5.0;
pub const HAND_TOL: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbodimentKind {
    /// Three-joint planar arm with a parallel gripper.
    Arm3,
    /// Three independent two-joint fingers over a palm.
    Fingers,
}

impl EmbodimentKind {
    pub fn name(self) -> &'static str {
        match self {
            EmbodimentKind::Arm3 => "arm3",
            EmbodimentKind::Fingers => "fingers",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embodiment {
    pub kind: EmbodimentKind,
    /// Link lengths in meters; per finger for the hand.
    pub links: Vec<f64>,
    pub limits: Vec<(f64, f64)>,
    /// Chain base positions (one for the arm, one per finger).
    pub bases: Vec<[f64; 2]>,
}

impl Embodiment {
    pub fn arm3() -> Self {
        use std::f64::consts::PI;
        Embodiment {
            kind: EmbodimentKind::Arm3,
            links: vec![0.3, 0.25, 0.15],
            limits: vec![(-PI, PI), (-2.8, 2.8), (-2.8, 2.8)],
            bases: vec![[0.0, 0.0]],
        }
    }

    pub fn fingers() -> Self {
        Embodiment {
            kind: EmbodimentKind::Fingers,
            links: vec![0.07, 0.06],
            limits: vec![(-1.2, 1.2), (-0.2, 2.6)],
            bases: vec![[-0.04, 0.0], [0.0, 0.0], [0.04, 0.0]],
        }
    }

    pub fn of(kind: EmbodimentKind) -> Self {
        match kind {
            EmbodimentKind::Arm3 => Self::arm3(),
            EmbodimentKind::Fingers => Self::fingers(),
        }
    }

    pub fn n_joints(&self) -> usize {
        self.links.len() * self.bases.len()
    }

    /// Joint deltas plus the gripper command for the arm; joint deltas for the hand.
    pub fn action_dim(&self) -> usize {
        match self.kind {
            EmbodimentKind::Arm3 => 4,
            EmbodimentKind::Fingers => 6,
        }
    }

    /// Joint angles, plus gripper opening for the arm.
    pub fn proprio_dim(&self) -> usize {
        self.action_dim()
    }

    pub fn joint_limit(&self, j: usize) -> (f64, f64) {
        self.limits[j % self.links.len()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Reach,
    Push,
    Pick,
    CloseDoor,
    PickMulti,
    PickClutter,
    HandReach,
}

impl TaskId {
    pub const ALL: [TaskId; 7] = [
        TaskId::Reach,
        TaskId::Push,
        TaskId::Pick,
        TaskId::CloseDoor,
        TaskId::PickMulti,
        TaskId::PickClutter,
        TaskId::HandReach,
    ];

    pub fn embodiment(self) -> Embodiment {
        Embodiment::of(self.embodiment_kind())
    }

    pub fn embodiment_kind(self) -> EmbodimentKind {
        match self {
            TaskId::HandReach => EmbodimentKind::Fingers,
            _ => EmbodimentKind::Arm3,
        }
    }

    /// Rollout horizon at 5 Hz.
    pub fn max_steps(self) -> usize {
        match self {
            TaskId::Reach | TaskId::HandReach => 60,
            TaskId::Pick | TaskId::PickMulti | TaskId::PickClutter => 80,
            TaskId::CloseDoor => 100,
            TaskId::Push => 120,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Reach => "reach",
            TaskId::Push => "push",
            TaskId::Pick => "pick",
            TaskId::CloseDoor => "close_door",
            TaskId::PickMulti => "pick_multi",
            TaskId::PickClutter => "pick_clutter",
            TaskId::HandReach => "hand_reach",
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == key || t.name().replace('_', "") == key)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: [u8; 3],
    pub pos: [f64; 2],
    pub theta: f64,
    pub radius: f64,
    /// Height above the table.
    pub z: f64,
    pub pushable: bool,
    pub graspable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Door {
    pub hinge: [f64; 2],
    pub length: f64,
    /// 0 is closed; negative angles swing the free end toward the robot.
    pub angle: f64,
    /// Hinge on the right, closing toward -x.
    pub mirrored: bool,
}

impl Door {
    pub fn side(&self) -> f64 {
        if self.mirrored {
            -1.0
        } else {
            1.0
        }
    }

    pub fn tip(&self) -> [f64; 2] {
        [
            self.hinge[0] + self.side() * self.length * self.angle.cos(),
            self.hinge[1] + self.length * self.angle.sin(),
        ]
    }

    /// Point in hinge polar coordinates (radius, angle), mirrored so the
    /// closed door lies along angle 0.
    pub fn polar(&self, p: [f64; 2]) -> (f64, f64) {
        let (x, y) = (self.side() * (p[0] - self.hinge[0]), p[1] - self.hinge[1]);
        (x.hypot(y), y.atan2(x))
    }

    pub fn from_polar(&self, r: f64, phi: f64) -> [f64; 2] {
        [self.hinge[0] + self.side() * r * phi.cos(), self.hinge[1] + r * phi.sin()]
    }
}

/// Rigid attachment of a held object in the end-effector frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grasp {
    pub object: usize,
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub task: TaskId,
    pub variation: Option<usize>,
    pub joints: Vec<f64>,
    /// Gripper opening in [0, 1]; 1 is open.
    pub gripper: f64,
    pub objects: Vec<Object>,
    /// Index of the task-relevant object.
    pub target: usize,
    pub goal: Option<[f64; 2]>,
    pub door: Option<Door>,
    pub held: Option<Grasp>,
    pub background: u32,
    pub step: u64,
    /// Set when the last step hit a joint limit.
    pub clamped: bool,
}

impl SimState {
    pub fn embodiment(&self) -> Embodiment {
        self.task.embodiment()
    }

    /// Proprioceptive vector: joint angles, plus gripper opening for the arm.
    pub fn proprio(&self) -> Vec<f64> {
        let mut p = self.joints.clone();
        if self.task.embodiment_kind() == EmbodimentKind::Arm3 {
            p.push(self.gripper);
        }
        p
    }

    /// End-effector pose of the arm, or the index fingertip of the hand.
    pub fn ee(&self) -> Pose {
        let emb = self.embodiment();
        match emb.kind {
            EmbodimentKind::Arm3 => fk(&emb, &self.joints).expect("state joints within limits"),
            EmbodimentKind::Fingers => finger_tips(&emb, &self.joints)[tasks::INDEX_FINGER],
        }
    }

    pub fn target_object(&self) -> &Object {
        &self.objects[self.target]
    }
}
