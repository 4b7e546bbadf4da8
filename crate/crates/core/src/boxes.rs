use std::f64::consts::PI;

/// Nine-parameter box (center, size, yaw, planar velocity) plus detection
/// metadata. `class` is the semantic label (`1..=K`) of the object.
#[derive(Clone, Debug, PartialEq)]
pub struct Box9 {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub score: f64,
    pub class: u8,
    /// Proposal feature carried from the detection head (empty for ground truth).
    pub feature: Vec<f32>,
}

impl Box9 {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class: u8) -> Self {
        Self {
            center,
            size,
            yaw: wrap_yaw(yaw),
            velocity: [0.0; 2],
            score: 1.0,
            class,
            feature: Vec::new(),
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn is_valid(&self) -> bool {
        self.size.iter().all(|&s| s > 0.0 && s.is_finite())
            && self.center.iter().all(|v| v.is_finite())
            && self.yaw > -PI
            && self.yaw <= PI
            && (0.0..=1.0).contains(&self.score)
    }

    /// BEV footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.size[0] / 2.0;
        let hw = self.size[1] / 2.0;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[x, y]| {
            [
                self.center[0] + c * x - s * y,
                self.center[1] + s * x + c * y,
            ]
        })
    }

    pub fn bev_center_distance(&self, other: &Box9) -> f64 {
        let dx = self.center[0] - other.center[0];
        let dy = self.center[1] - other.center[1];
        (dx * dx + dy * dy).sqrt()
    }

    /// Point expressed in the box frame (translate, then rotate by `-yaw`).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_yaw(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let w = a - 2.0 * PI * ((a - PI) / (2.0 * PI)).ceil();
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}
