//! Terrain profiles for the planar tasks.
//!
//! Ground and ceiling are piecewise-linear in horizontal position. Knots may
//! share an `x` to express a vertical step; evaluation is right-continuous.
//! Holes are open intervals where the ground is absent.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EnvError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    Flat,
    Stair,
    Gap,
    Climb,
    Crawl,
    Tilt,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Flat,
        TaskKind::Stair,
        TaskKind::Gap,
        TaskKind::Climb,
        TaskKind::Crawl,
        TaskKind::Tilt,
    ];

    /// Legal difficulty interval, metres.
    pub fn difficulty_range(&self) -> (f64, f64) {
        match self {
            TaskKind::Flat => (0.0, 0.0),
            TaskKind::Stair => (0.02, 0.40),
            TaskKind::Gap => (0.02, 1.0),
            TaskKind::Climb => (0.05, 0.80),
            TaskKind::Crawl => (0.16, 0.60),
            TaskKind::Tilt => (0.16, 0.60),
        }
    }

    /// Whether a larger difficulty value is a harder terrain. Crawl and Tilt
    /// get harder as the opening shrinks.
    pub fn harder_when_larger(&self) -> bool {
        !matches!(self, TaskKind::Crawl | TaskKind::Tilt)
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Flat => "flat",
            TaskKind::Stair => "stair",
            TaskKind::Gap => "gap",
            TaskKind::Climb => "climb",
            TaskKind::Crawl => "crawl",
            TaskKind::Tilt => "tilt",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .iter()
            .copied()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| EnvError::UnknownTask(s.to_string()))
    }
}

/// Piecewise-linear function with constant extrapolation. Heights may be
/// `+∞` (used for absent ceilings).
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseLinear {
    knots: Vec<(f64, f64)>,
}

impl PiecewiseLinear {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self, EnvError> {
        if knots.is_empty() {
            return Err(EnvError::InvalidTerrain("profile needs at least one knot".into()));
        }
        if knots.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err(EnvError::InvalidTerrain("knot x positions must be non-decreasing".into()));
        }
        if knots.iter().any(|k| !k.0.is_finite() || k.1.is_nan()) {
            return Err(EnvError::InvalidTerrain("knots must be finite".into()));
        }
        Ok(Self { knots })
    }

    pub fn constant(v: f64) -> Self {
        Self { knots: vec![(0.0, v)] }
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = &self.knots;
        if x < k[0].0 {
            return k[0].1;
        }
        // Last knot with knot.x <= x (right-continuity at duplicated x).
        let i = k.partition_point(|p| p.0 <= x) - 1;
        if i + 1 >= k.len() {
            return k[i].1;
        }
        let (x0, y0) = k[i];
        let (x1, y1) = k[i + 1];
        if y0.is_infinite() || y1.is_infinite() {
            return y0;
        }
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    /// Extremum over `[a, b]` restricted to points where `keep(x)` holds.
    /// Candidate points are the interval ends and all knots inside; a linear
    /// piece attains its extrema there.
    fn extremum(&self, a: f64, b: f64, extra: &[f64], keep: impl Fn(f64) -> bool, max: bool) -> Option<f64> {
        let mut best: Option<f64> = None;
        let mut consider = |v: f64| {
            best = Some(match best {
                None => v,
                Some(b) if max => b.max(v),
                Some(b) => b.min(v),
            });
        };
        for &x in [a, b].iter().chain(extra.iter()) {
            if x >= a && x <= b && keep(x) {
                consider(self.eval(x));
            }
        }
        for &(x, y) in &self.knots {
            if x >= a && x <= b && keep(x) {
                consider(y);
                // left limit at a jump
                consider(self.eval_left(x));
            }
        }
        best
    }

    fn eval_left(&self, x: f64) -> f64 {
        let k = &self.knots;
        let i = k.partition_point(|p| p.0 < x);
        if i == 0 {
            return k[0].1;
        }
        let (x0, y0) = k[i - 1];
        if i >= k.len() {
            return y0;
        }
        let (x1, y1) = k[i];
        if x1 == x0 || y0.is_infinite() || y1.is_infinite() {
            return y0;
        }
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TerrainProfile {
    pub ground: PiecewiseLinear,
    pub ceiling: PiecewiseLinear,
    /// Open intervals `(a, b)` with no ground.
    pub holes: Vec<(f64, f64)>,
    pub task_kind: TaskKind,
    pub difficulty: f64,
    pub length: f64,
}

/// Horizontal position where the task obstacle begins.
pub const OBSTACLE_START: f64 = 4.0;
const OBSTACLE_SPAN: f64 = 1.5;
const STAIR_TREAD: f64 = 0.8;
const STAIR_STEPS: usize = 3;
const TILT_FLOOR: f64 = 0.1;

impl TerrainProfile {
    pub fn build(task_kind: TaskKind, difficulty: f64, length: f64) -> Result<Self, EnvError> {
        let (lo, hi) = task_kind.difficulty_range();
        if !(difficulty >= lo && difficulty <= hi) {
            return Err(EnvError::DifficultyOutOfRange {
                task: task_kind,
                difficulty,
                min: lo,
                max: hi,
            });
        }
        let inf = f64::INFINITY;
        let x0 = OBSTACLE_START;
        let x1 = OBSTACLE_START + OBSTACLE_SPAN;
        let flat = vec![(0.0, 0.0), (length, 0.0)];
        let no_ceiling = vec![(0.0, inf)];
        let (ground, ceiling, holes) = match task_kind {
            TaskKind::Flat => (flat, no_ceiling, vec![]),
            TaskKind::Stair => {
                let mut g = vec![(0.0, 0.0)];
                for s in 0..STAIR_STEPS {
                    let x = x0 + s as f64 * STAIR_TREAD;
                    g.push((x, s as f64 * difficulty));
                    g.push((x, (s + 1) as f64 * difficulty));
                }
                g.push((length, STAIR_STEPS as f64 * difficulty));
                (g, no_ceiling, vec![])
            }
            TaskKind::Gap => (flat, no_ceiling, vec![(x0, x0 + difficulty)]),
            TaskKind::Climb => (
                vec![(0.0, 0.0), (x0, 0.0), (x0, difficulty), (length, difficulty)],
                no_ceiling,
                vec![],
            ),
            TaskKind::Crawl => (
                flat,
                vec![(0.0, inf), (x0, inf), (x0, difficulty), (x1, difficulty), (x1, inf)],
                vec![],
            ),
            TaskKind::Tilt => (
                vec![(0.0, 0.0), (x0, 0.0), (x0, TILT_FLOOR), (x1, TILT_FLOOR), (x1, 0.0), (length, 0.0)],
                vec![
                    (0.0, inf),
                    (x0, inf),
                    (x0, TILT_FLOOR + difficulty),
                    (x1, TILT_FLOOR + difficulty),
                    (x1, inf),
                ],
                vec![],
            ),
        };
        Ok(Self {
            ground: PiecewiseLinear::new(ground)?,
            ceiling: PiecewiseLinear::new(ceiling)?,
            holes,
            task_kind,
            difficulty,
            length,
        })
    }

    pub fn has_ground(&self, x: f64) -> bool {
        !self.holes.iter().any(|&(a, b)| x > a && x < b)
    }

    /// Ground height, or `-∞` over a hole.
    pub fn ground_height(&self, x: f64) -> f64 {
        if self.has_ground(x) {
            self.ground.eval(x)
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn ceiling_height(&self, x: f64) -> f64 {
        self.ceiling.eval(x)
    }

    fn hole_edges(&self) -> Vec<f64> {
        self.holes.iter().flat_map(|&(a, b)| [a, b]).collect()
    }

    /// Highest ground point over `[a, b]`; `-∞` if the span lies inside a hole.
    pub fn max_ground(&self, a: f64, b: f64) -> f64 {
        self.ground
            .extremum(a, b, &self.hole_edges(), |x| self.has_ground(x), true)
            .unwrap_or(f64::NEG_INFINITY)
    }

    /// Lowest ceiling point over `[a, b]`; `+∞` if no ceiling there.
    pub fn min_ceiling(&self, a: f64, b: f64) -> f64 {
        self.ceiling
            .extremum(a, b, &[], |_| true, false)
            .unwrap_or(f64::INFINITY)
    }

    pub fn min_ground_level(&self) -> f64 {
        self.ground.knots().iter().map(|k| k.1).fold(f64::INFINITY, f64::min)
    }

    pub fn to_json(&self) -> TerrainJson {
        TerrainJson {
            task_kind: self.task_kind,
            difficulty: self.difficulty,
            length: self.length,
            ground: self.ground.knots().iter().map(|&(x, h)| [x, h]).collect(),
            ceiling: self
                .ceiling
                .knots()
                .iter()
                .map(|&(x, h)| (x, if h.is_finite() { Some(h) } else { None }))
                .collect(),
            holes: self.holes.iter().map(|&(a, b)| [a, b]).collect(),
        }
    }

    pub fn from_json(j: &TerrainJson) -> Result<Self, EnvError> {
        let ground = PiecewiseLinear::new(j.ground.iter().map(|k| (k[0], k[1])).collect())?;
        if ground.knots().iter().any(|k| !k.1.is_finite()) {
            return Err(EnvError::InvalidTerrain("ground heights must be finite".into()));
        }
        let ceiling = if j.ceiling.is_empty() {
            PiecewiseLinear::constant(f64::INFINITY)
        } else {
            PiecewiseLinear::new(
                j.ceiling
                    .iter()
                    .map(|&(x, h)| (x, h.unwrap_or(f64::INFINITY)))
                    .collect(),
            )?
        };
        if j.holes.iter().any(|h| !(h[1] > h[0])) {
            return Err(EnvError::InvalidTerrain("hole intervals must have positive width".into()));
        }
        let t = Self {
            ground,
            ceiling,
            holes: j.holes.iter().map(|h| (h[0], h[1])).collect(),
            task_kind: j.task_kind,
            difficulty: j.difficulty,
            length: j.length,
        };
        t.check_clearance()?;
        Ok(t)
    }

    /// Ceiling must stay strictly above ground wherever both are finite.
    fn check_clearance(&self) -> Result<(), EnvError> {
        let mut xs: Vec<f64> = self.ground.knots().iter().map(|k| k.0).collect();
        xs.extend(self.ceiling.knots().iter().map(|k| k.0));
        xs.push(0.0);
        xs.push(self.length);
        for x in xs {
            let c = self.ceiling.eval(x);
            let g = self.ground.eval(x);
            if c.is_finite() && c <= g {
                return Err(EnvError::InvalidTerrain(format!("ceiling {c} not above ground {g} at x = {x}")));
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<(), EnvError> {
        let s = serde_json::to_string_pretty(&self.to_json()).map_err(|e| EnvError::Io(e.to_string()))?;
        std::fs::write(path, s).map_err(|e| EnvError::Io(e.to_string()))
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self, EnvError> {
        let s = std::fs::read_to_string(path).map_err(|e| EnvError::Io(e.to_string()))?;
        let j: TerrainJson = serde_json::from_str(&s).map_err(|e| EnvError::InvalidTerrain(e.to_string()))?;
        Self::from_json(&j)
    }
}

/// On-disk terrain description. Absent ceiling heights are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerrainJson {
    pub task_kind: TaskKind,
    pub difficulty: f64,
    pub length: f64,
    pub ground: Vec<[f64; 2]>,
    pub ceiling: Vec<(f64, Option<f64>)>,
    pub holes: Vec<[f64; 2]>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_has_zero_ground_and_no_ceiling() {
        let t = TerrainProfile::build(TaskKind::Flat, 0.0, 12.0).unwrap();
        for i in 0..=120 {
            let x = i as f64 * 0.1;
            assert_eq!(t.ground_height(x), 0.0);
            assert_eq!(t.ceiling_height(x), f64::INFINITY);
        }
        assert!(t.holes.is_empty());
    }

    #[test]
    fn crawl_ceiling_dips_to_difficulty() {
        let t = TerrainProfile::build(TaskKind::Crawl, 0.25, 12.0).unwrap();
        assert_eq!(t.ceiling_height(OBSTACLE_START + 0.5), 0.25);
        assert_eq!(t.ceiling_height(1.0), f64::INFINITY);
        assert_eq!(t.min_ceiling(0.0, 12.0), 0.25);
        assert_eq!(t.ground_height(OBSTACLE_START + 0.5), 0.0);
    }

    #[test]
    fn gap_has_one_hole_of_requested_width() {
        for &w in &[0.05, 0.3, 0.75] {
            let t = TerrainProfile::build(TaskKind::Gap, w, 12.0).unwrap();
            // brute-force scan on a 1 mm grid
            let mut absent = 0usize;
            let mut runs = 0usize;
            let mut prev = true;
            for i in 0..=12_000 {
                let x = i as f64 * 1e-3;
                let present = t.has_ground(x);
                if !present {
                    absent += 1;
                    if prev {
                        runs += 1;
                    }
                }
                prev = present;
            }
            assert_eq!(runs, 1);
            let measured = absent as f64 * 1e-3;
            assert!((measured - w).abs() <= 1.5e-3, "width {w} measured {measured}");
        }
    }

    #[test]
    fn out_of_range_difficulty_rejected() {
        assert!(matches!(
            TerrainProfile::build(TaskKind::Crawl, 0.05, 12.0),
            Err(EnvError::DifficultyOutOfRange { .. })
        ));
        assert!(matches!(
            TerrainProfile::build(TaskKind::Flat, 0.1, 12.0),
            Err(EnvError::DifficultyOutOfRange { .. })
        ));
    }

    #[test]
    fn unknown_task_name() {
        assert!(matches!("swim".parse::<TaskKind>(), Err(EnvError::UnknownTask(_))));
        assert_eq!("Crawl".parse::<TaskKind>().unwrap(), TaskKind::Crawl);
    }

    #[test]
    fn step_is_right_continuous() {
        let t = TerrainProfile::build(TaskKind::Climb, 0.4, 12.0).unwrap();
        assert_eq!(t.ground_height(OBSTACLE_START - 1e-9), 0.0);
        assert_eq!(t.ground_height(OBSTACLE_START), 0.4);
        assert_eq!(t.max_ground(OBSTACLE_START - 0.1, OBSTACLE_START), 0.4);
    }

    #[test]
    fn ceiling_above_ground_everywhere() {
        for kind in TaskKind::ALL {
            let (lo, hi) = kind.difficulty_range();
            for d in [lo, hi] {
                let t = TerrainProfile::build(kind, d, 12.0).unwrap();
                for i in 0..=1200 {
                    let x = i as f64 * 0.01;
                    let c = t.ceiling_height(x);
                    if c.is_finite() {
                        assert!(c > t.ground.eval(x), "{kind} at {x}");
                    }
                }
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let t = TerrainProfile::build(TaskKind::Tilt, 0.3, 10.0).unwrap();
        let j = serde_json::to_string(&t.to_json()).unwrap();
        let back = TerrainProfile::from_json(&serde_json::from_str(&j).unwrap()).unwrap();
        assert_eq!(t, back);
        let g = TerrainProfile::build(TaskKind::Gap, 0.3, 10.0).unwrap();
        let back = TerrainProfile::from_json(&g.to_json()).unwrap();
        assert_eq!(g, back);
    }
}
