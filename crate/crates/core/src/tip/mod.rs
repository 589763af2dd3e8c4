//! Task-invariant property (TIP) extraction from privileged simulator state.
//!
//! An extractor is a small program in the [`expr`] language. Programs may come
//! from a handcrafted source, from a language-model client or from the mock
//! client; whatever their origin they must pass [`validate_extractor`] on the
//! probe fixture set before they can be used for training.

pub mod expr;
mod llm;
mod probes;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::SimState;
use expr::{Fields, Program};

pub use llm::{
    generate_extractor, obs_schema, render_prompt, CannedClient, FieldSchema, LlmClient, LlmError, MockClient, ObsSchema,
    PROMPT_TEMPLATE_V1, PROMPT_VERSION,
};
#[cfg(feature = "live-llm")]
pub use llm::LiveClient;
pub use probes::probe_fixture;

/// Number of properties produced by the reference extractor.
pub const TIP_DIM: usize = 4;
/// Clearance values are clamped to this magnitude, metres.
pub const MAX_RANGE: f64 = 3.0;

pub const INVARIANCE_TOLERANCE: f64 = 1e-6;
pub const VARIANCE_FLOOR: f64 = 1e-8;
pub const MIN_PROBES: usize = 64;

/// Reference extractor: the two clearances, contact stability and slip speed.
pub const HANDCRAFTED_SOURCE: &str = "\
# clearance and contact properties
ground_clearance = clamp(body_y - footprint_ground_max, -max_range, max_range)
ceiling_clearance = clamp(footprint_ceiling_min - body_y, -max_range, max_range)
contact_stable = in_contact * (1 - smoothstep(0.05, 0.10, slip_speed))
slip_speed = slip_speed
";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TipError {
    #[error("extractor `{name}` failed to parse: {reason}")]
    Parse { name: String, reason: String },
    #[error("extractor `{extractor}` produced a non-finite value for `{component}`")]
    NonFinite { extractor: String, component: String },
    #[error("extractor `{0}` has not passed validation")]
    NotValidated(String),
    #[error("extractor generation failed: {0}")]
    GenerationFailed(String),
    #[error("language model client timed out (retriable): {0}")]
    Retriable(String),
    #[error("probe set has {0} states, need at least {MIN_PROBES}")]
    TooFewProbes(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Handcrafted,
    #[serde(rename = "LLMGenerated")]
    LlmGenerated,
    Mock,
}

/// Property values, in the order of the extractor's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TipVector {
    pub values: Vec<f64>,
}

impl TipVector {
    pub fn ground_clearance(&self) -> f64 {
        self.values[0]
    }
    pub fn ceiling_clearance(&self) -> f64 {
        self.values[1]
    }
    pub fn contact_stable(&self) -> f64 {
        self.values[2]
    }
    pub fn slip_speed(&self) -> f64 {
        self.values[3]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub probe_count: usize,
    pub finite: CheckOutcome,
    pub invariance: CheckOutcome,
    /// Largest ∞-norm change under domain perturbation.
    pub max_invariance_delta: f64,
    pub non_constant: CheckOutcome,
    /// Per-component variance across probes.
    pub variances: Vec<f64>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.finite.passed && self.invariance.passed && self.non_constant.passed
    }
}

/// Serialized form: `{name, source_text, output_dim, provenance}` plus the
/// optional validation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub name: String,
    pub source_text: String,
    pub output_dim: usize,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_report: Option<ValidationReport>,
}

impl ExtractorSpec {
    pub fn handcrafted() -> Self {
        Self {
            name: "clearance_contact_v1".into(),
            source_text: HANDCRAFTED_SOURCE.into(),
            output_dim: TIP_DIM,
            provenance: Provenance::Handcrafted,
            validation_report: None,
        }
    }

    pub fn compile(&self) -> Result<Extractor, TipError> {
        Extractor::compile(self.clone())
    }
}

const SCALAR_FIELDS: &[&str] = &[
    "body_x",
    "body_y",
    "body_vx",
    "body_vy",
    "leg_extension",
    "contact_force",
    "slip_speed",
    "in_contact",
    "command_velocity",
    "footprint_ground_max",
    "footprint_ceiling_min",
    "max_range",
    "mass",
    "friction",
    "com_offset",
    "actuator_gain",
];

pub(crate) fn known_field(name: &str, idx: Option<usize>) -> bool {
    match idx {
        None => SCALAR_FIELDS.contains(&name),
        Some(_) => name == "local_heights",
    }
}

struct StateFields<'a>(&'a SimState);

impl Fields for StateFields<'_> {
    fn scalar(&self, name: &str) -> Option<f64> {
        let s = self.0;
        Some(match name {
            "body_x" => s.body_position.0,
            "body_y" => s.body_position.1,
            "body_vx" => s.body_velocity.0,
            "body_vy" => s.body_velocity.1,
            "leg_extension" => s.leg_extension,
            "contact_force" => s.contact_force,
            "slip_speed" => s.slip_speed,
            "in_contact" => {
                if s.in_contact {
                    1.0
                } else {
                    0.0
                }
            }
            "command_velocity" => s.command_velocity,
            "footprint_ground_max" => s.footprint_ground_max,
            "footprint_ceiling_min" => s.footprint_ceiling_min,
            "max_range" => MAX_RANGE,
            "mass" => s.domain.mass,
            "friction" => s.domain.friction,
            "com_offset" => s.domain.com_offset,
            "actuator_gain" => s.domain.actuator_gain,
            _ => return None,
        })
    }

    fn indexed(&self, name: &str, i: usize) -> Option<f64> {
        (name == "local_heights").then(|| self.0.local_heights.get(i).copied()).flatten()
    }
}

/// A parsed extractor ready for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    spec: ExtractorSpec,
    program: Program,
}

impl Extractor {
    pub fn compile(spec: ExtractorSpec) -> Result<Self, TipError> {
        let program = expr::parse_program(&spec.source_text, &known_field).map_err(|e| TipError::Parse {
            name: spec.name.clone(),
            reason: e.to_string(),
        })?;
        if program.outputs.len() != spec.output_dim {
            return Err(TipError::Parse {
                name: spec.name.clone(),
                reason: format!(
                    "declared output_dim {} but program defines {} outputs",
                    spec.output_dim,
                    program.outputs.len()
                ),
            });
        }
        Ok(Self { spec, program })
    }

    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    pub fn output_dim(&self) -> usize {
        self.program.outputs.len()
    }

    pub fn output_names(&self) -> Vec<String> {
        self.program.outputs.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Evaluates without a finiteness check.
    pub fn eval_raw(&self, state: &SimState) -> Vec<f64> {
        let f = StateFields(state);
        self.program.outputs.iter().map(|(_, e)| e.eval(&f)).collect()
    }

    pub fn extract(&self, state: &SimState) -> Result<TipVector, TipError> {
        let values = self.eval_raw(state);
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(TipError::NonFinite {
                extractor: self.spec.name.clone(),
                component: self.program.outputs[i].0.clone(),
            });
        }
        Ok(TipVector { values })
    }
}

fn perturbations(state: &SimState) -> Vec<SimState> {
    let mut out = Vec::new();
    for factor in [0.8, 1.2] {
        let mut variants = Vec::new();
        let d = state.domain;
        let mut s = state.clone();
        s.domain.mass = d.mass * factor;
        variants.push(s);
        let mut s = state.clone();
        s.domain.friction = d.friction * factor;
        variants.push(s);
        let mut s = state.clone();
        s.domain.actuator_gain = d.actuator_gain * factor;
        variants.push(s);
        let mut s = state.clone();
        // relative for non-zero offsets, plus 20% of the source half-range
        s.domain.com_offset = d.com_offset * factor + (factor - 1.0) * 0.05;
        variants.push(s);
        let mut s = state.clone();
        s.domain.mass = d.mass * factor;
        s.domain.friction = d.friction * factor;
        s.domain.actuator_gain = d.actuator_gain * factor;
        s.domain.com_offset = d.com_offset * factor + (factor - 1.0) * 0.05;
        variants.push(s);
        out.extend(variants);
    }
    out
}

fn sorted_variance(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(|a, b| a.total_cmp(b));
    dev.iter().sum::<f64>() / n
}

/// Runs the three probe checks. Failures are report contents, not errors.
/// The outcome does not depend on the order of `probes`.
pub fn validate_extractor(extractor: &Extractor, probes: &[SimState]) -> ValidationReport {
    let names = extractor.output_names();
    let dim = extractor.output_dim();
    let outputs: Vec<Vec<f64>> = probes.iter().map(|s| extractor.eval_raw(s)).collect();

    let non_finite: Vec<String> = names
        .iter()
        .enumerate()
        .filter(|(i, _)| outputs.iter().any(|o| !o[*i].is_finite()))
        .map(|(_, n)| n.clone())
        .collect();
    let finite = CheckOutcome {
        passed: non_finite.is_empty() && !probes.is_empty(),
        detail: if probes.is_empty() {
            "no probes".into()
        } else if non_finite.is_empty() {
            "all outputs finite".into()
        } else {
            format!("non-finite outputs in: {}", non_finite.join(", "))
        },
    };

    let mut max_delta: f64 = 0.0;
    let mut worst = String::new();
    for (s, base) in probes.iter().zip(&outputs) {
        for p in perturbations(s) {
            let o = extractor.eval_raw(&p);
            for i in 0..dim {
                let (a, b) = (base[i], o[i]);
                let delta = if a == b {
                    0.0
                } else if a.is_finite() && b.is_finite() {
                    (a - b).abs()
                } else {
                    f64::INFINITY
                };
                if delta > max_delta {
                    max_delta = delta;
                    worst = names[i].clone();
                }
            }
        }
    }
    let invariance = CheckOutcome {
        passed: max_delta < INVARIANCE_TOLERANCE,
        detail: if max_delta < INVARIANCE_TOLERANCE {
            format!("max delta {max_delta:e}")
        } else {
            format!("`{worst}` changes by {max_delta:e} under domain perturbation")
        },
    };

    let variances: Vec<f64> = (0..dim)
        .map(|i| sorted_variance(outputs.iter().map(|o| o[i]).collect()))
        .collect();
    let flat: Vec<String> = names
        .iter()
        .zip(&variances)
        .filter(|(_, &v)| !(v > VARIANCE_FLOOR))
        .map(|(n, _)| n.clone())
        .collect();
    let non_constant = CheckOutcome {
        passed: flat.is_empty() && !probes.is_empty(),
        detail: if flat.is_empty() {
            "every component varies".into()
        } else {
            format!("constant components: {}", flat.join(", "))
        },
    };

    ValidationReport {
        probe_count: probes.len(),
        finite,
        invariance,
        max_invariance_delta: max_delta,
        non_constant,
        variances,
    }
}

/// An extractor that has passed validation. Only these feed training.
#[derive(Clone, Debug, PartialEq)]
pub struct RegisteredExtractor {
    inner: Extractor,
}

impl RegisteredExtractor {
    pub fn register(spec: ExtractorSpec, probes: &[SimState]) -> Result<Self, TipError> {
        if probes.len() < MIN_PROBES {
            return Err(TipError::TooFewProbes(probes.len()));
        }
        let mut inner = Extractor::compile(spec)?;
        let report = validate_extractor(&inner, probes);
        let passed = report.passed();
        inner.spec.validation_report = Some(report);
        if !passed {
            return Err(TipError::NotValidated(inner.spec.name.clone()));
        }
        Ok(Self { inner })
    }

    pub fn handcrafted() -> Self {
        Self::register(ExtractorSpec::handcrafted(), &probe_fixture()).expect("reference extractor validates")
    }

    pub fn extract(&self, state: &SimState) -> Result<TipVector, TipError> {
        self.inner.extract(state)
    }

    pub fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    pub fn spec(&self) -> &ExtractorSpec {
        self.inner.spec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_env, DomainParams, EnvConfig, Environment, PiecewiseLinear, TaskKind, TerrainProfile};

    fn handcrafted() -> Extractor {
        ExtractorSpec::handcrafted().compile().unwrap()
    }

    #[test]
    fn flat_ground_clearance() {
        let mut env = make_env(TaskKind::Flat, 0.0, DomainParams::default(), 0, &EnvConfig::default()).unwrap();
        env.set_kinematics((2.0, 0.3), (0.0, 0.0), 0.3, true);
        let f = handcrafted().extract(&env.state()).unwrap();
        assert!((f.ground_clearance() - 0.3).abs() < 1e-12);
        assert_eq!(f.ceiling_clearance(), MAX_RANGE);
        assert_eq!(f.contact_stable(), 1.0);
        assert_eq!(f.slip_speed(), 0.0);
    }

    #[test]
    fn ramp_clearance_matches_dense_scan() {
        let ground = PiecewiseLinear::new(vec![(0.0, 0.0), (1.9, 0.0), (2.05, 0.12), (2.1, 0.08), (12.0, 0.08)]).unwrap();
        let terrain = TerrainProfile {
            ground,
            ceiling: PiecewiseLinear::constant(f64::INFINITY),
            holes: vec![],
            task_kind: TaskKind::Flat,
            difficulty: 0.0,
            length: 12.0,
        };
        let mut env = Environment::with_terrain(terrain.clone(), DomainParams::default(), 0, EnvConfig::default());
        let ext = handcrafted();
        for &(x, y) in &[(2.0, 0.4), (1.95, 0.35), (2.1, 0.5), (1.8, 0.3)] {
            env.set_kinematics((x, y), (0.0, 0.0), 0.25, false);
            let f = ext.extract(&env.state()).unwrap();
            // 1 mm scan of the footprint
            let l = env.config().body.half_length;
            let lo = ((x - l) * 1000.0).round() as i64;
            let hi = ((x + l) * 1000.0).round() as i64;
            let brute = (lo..=hi)
                .map(|k| y - terrain.ground.eval(k as f64 / 1000.0))
                .fold(f64::INFINITY, f64::min);
            assert!((f.ground_clearance() - brute).abs() < 1e-9, "x={x}: {} vs {brute}", f.ground_clearance());
        }
    }

    #[test]
    fn mass_change_leaves_properties_unchanged() {
        let mut env = make_env(TaskKind::Crawl, 0.3, DomainParams::default(), 0, &EnvConfig::default()).unwrap();
        env.set_kinematics((4.2, 0.2), (0.5, 0.0), 0.2, true);
        let mut s = env.state();
        s.domain.mass = 0.8;
        let a = handcrafted().extract(&s).unwrap();
        s.domain.mass = 1.2;
        let b = handcrafted().extract(&s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_names_component() {
        let spec = ExtractorSpec {
            name: "bad".into(),
            source_text: "a = 1\nb = slip_speed / contact_force".into(),
            output_dim: 2,
            provenance: Provenance::LlmGenerated,
            validation_report: None,
        };
        let ext = spec.compile().unwrap();
        let mut env = make_env(TaskKind::Flat, 0.0, DomainParams::default(), 0, &EnvConfig::default()).unwrap();
        env.set_kinematics((2.0, 1.0), (0.0, 0.0), 0.25, false);
        match ext.extract(&env.state()) {
            Err(TipError::NonFinite { component, .. }) => assert_eq!(component, "b"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn handcrafted_passes_validation() {
        let probes = probe_fixture();
        assert!(probes.len() >= MIN_PROBES);
        let r = validate_extractor(&handcrafted(), &probes);
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.max_invariance_delta, 0.0);
    }

    #[test]
    fn constant_extractor_fails_non_constancy() {
        let spec = ExtractorSpec {
            name: "zero".into(),
            source_text: "a = 0".into(),
            output_dim: 1,
            provenance: Provenance::Handcrafted,
            validation_report: None,
        };
        let r = validate_extractor(&spec.compile().unwrap(), &probe_fixture());
        assert!(r.finite.passed && r.invariance.passed);
        assert!(!r.non_constant.passed);
    }

    #[test]
    fn mass_reading_extractor_fails_invariance() {
        let spec = ExtractorSpec {
            name: "weighted".into(),
            source_text: "a = body_y * mass".into(),
            output_dim: 1,
            provenance: Provenance::LlmGenerated,
            validation_report: None,
        };
        let r = validate_extractor(&spec.compile().unwrap(), &probe_fixture());
        assert!(!r.invariance.passed);
        // delta = 0.2 · mass · body_y somewhere in the fixture; well above tolerance
        assert!(r.max_invariance_delta > 0.01, "{}", r.max_invariance_delta);
        assert!(RegisteredExtractor::register(spec, &probe_fixture()).is_err());
    }

    #[test]
    fn registration_requires_enough_probes() {
        let probes = probe_fixture();
        assert_eq!(
            RegisteredExtractor::register(ExtractorSpec::handcrafted(), &probes[..10]),
            Err(TipError::TooFewProbes(10))
        );
    }

    #[test]
    fn validation_is_order_independent() {
        let mut probes = probe_fixture();
        let a = validate_extractor(&handcrafted(), &probes);
        probes.reverse();
        probes.rotate_left(7);
        let b = validate_extractor(&handcrafted(), &probes);
        assert_eq!(a, b);
    }

    #[test]
    fn spec_json_has_documented_keys() {
        let j = serde_json::to_value(ExtractorSpec::handcrafted()).unwrap();
        let keys: Vec<&String> = j.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 4);
        for k in ["name", "source_text", "output_dim", "provenance"] {
            assert!(j.get(k).is_some());
        }
    }
}
