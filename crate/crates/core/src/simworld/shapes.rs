use serde::{Deserialize, Serialize};

/// Object silhouettes. The first eight double as the classes of the
/// synthetic shape corpus and the seen hand-reach objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Hexagon,
    Star,
    Ring,
    Ellipse,
    Tee,
    Ell,
    Pentagon,
    Crescent,
    Arrow,
    Hourglass,
    Frame,
}

impl Shape {
    pub const ALL: [Shape; 16] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Diamond,
        Shape::Cross,
        Shape::Hexagon,
        Shape::Star,
        Shape::Ring,
        Shape::Ellipse,
        Shape::Tee,
        Shape::Ell,
        Shape::Pentagon,
        Shape::Crescent,
        Shape::Arrow,
        Shape::Hourglass,
        Shape::Frame,
    ];

    pub fn index(self) -> usize {
        Shape::ALL.iter().position(|&s| s == self).unwrap()
    }

    /// Membership test in unit coordinates (the shape fits the unit disk).
    pub fn contains(self, u: f64, v: f64) -> bool {
        let r = u.hypot(v);
        let (au, av) = (u.abs(), v.abs());
        match self {
            Shape::Circle => r <= 1.0,
            Shape::Square => au.max(av) <= 0.75,
            Shape::Triangle => v >= -0.5 && v <= 1.0 - 1.732 * au,
            Shape::Diamond => au + av <= 1.0,
            Shape::Cross => (au <= 0.3 && av <= 0.95) || (av <= 0.3 && au <= 0.95),
            Shape::Hexagon => av <= 0.866 && 0.866 * au + 0.5 * av <= 0.866,
            Shape::Star => r <= 0.6 + 0.4 * (5.0 * v.atan2(u)).cos(),
            Shape::Ring => (0.55..=1.0).contains(&r),
            Shape::Ellipse => u * u + (v / 0.5) * (v / 0.5) <= 1.0,
            Shape::Tee => (au <= 0.9 && (0.35..=0.9).contains(&v)) || (au <= 0.25 && (-0.9..=0.35).contains(&v)),
            Shape::Ell => ((-0.8..=-0.3).contains(&u) && av <= 0.8) || (au <= 0.8 && (-0.8..=-0.3).contains(&v)),
            Shape::Pentagon => {
                let sector = std::f64::consts::TAU / 5.0;
                let phi = (v.atan2(u) - std::f64::consts::FRAC_PI_2).rem_euclid(sector) - sector / 2.0;
                r * phi.cos() <= (sector / 2.0).cos()
            }
            Shape::Crescent => r <= 1.0 && (u - 0.45).hypot(v) > 0.75,
            Shape::Arrow => (au <= 0.25 && (-0.9..=0.2).contains(&v)) || ((0.2..=0.9).contains(&v) && au <= 0.9 - v),
            Shape::Hourglass => au <= av && av <= 0.9,
            Shape::Frame => {
                let m = au.max(av);
                (0.45..=0.85).contains(&m)
            }
        }
    }
}
