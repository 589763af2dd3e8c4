use crate::env::{make_env, DomainParams, EnvConfig, SimState, TaskKind, GRAVITY};

/// Deterministic probe states covering airborne bodies, stance on flat and
/// stepped ground, gap edges and low ceilings, with a spread of slip speeds.
pub fn probe_fixture() -> Vec<SimState> {
    let config = EnvConfig::default();
    let domains = [
        DomainParams::default(),
        DomainParams { mass: 0.85, friction: 0.65, com_offset: -0.03, actuator_gain: 0.95 },
        DomainParams { mass: 1.15, friction: 0.95, com_offset: 0.04, actuator_gain: 1.08 },
    ];
    let cases: [(TaskKind, f64, &[f64]); 5] = [
        (TaskKind::Flat, 0.0, &[1.0, 2.5]),
        (TaskKind::Stair, 0.2, &[3.9, 4.1, 4.85]),
        (TaskKind::Gap, 0.5, &[3.8, 4.0, 4.25, 4.55]),
        (TaskKind::Crawl, 0.3, &[3.9, 4.5, 5.4]),
        (TaskKind::Climb, 0.4, &[3.95, 4.3]),
    ];
    let slips = [0.0, 0.03, 0.075, 0.2];
    let mut out = Vec::new();
    for (ci, (kind, difficulty, xs)) in cases.iter().enumerate() {
        for (xi, &x) in xs.iter().enumerate() {
            let domain = domains[(ci + xi) % domains.len()];
            let mut env = make_env(*kind, *difficulty, domain, 0, &config).expect("fixture task is legal");
            let ground = env.terrain().ground_height(x);
            let ground = if ground.is_finite() { ground } else { 0.0 };
            let ceiling = env.terrain().ceiling_height(x);
            // stance height fits under low ceilings
            let leg = if ceiling.is_finite() {
                (ceiling - ground - 0.08).clamp(config.body.leg_min, config.body.leg_nominal)
            } else {
                config.body.leg_nominal
            };
            for (k, &slip) in slips.iter().enumerate() {
                env.set_kinematics((x, ground + leg), (0.3 + 0.2 * k as f64, 0.0), leg, true);
                let mut s = env.state();
                s.slip_speed = slip;
                s.contact_force = domain.mass * GRAVITY * (1.0 - 0.1 * k as f64);
                out.push(s);
            }
            for (k, vy) in [-0.8, 0.6].into_iter().enumerate() {
                let y = ground + leg + 0.1 + 0.15 * k as f64;
                env.set_kinematics((x, y), (0.5, vy), leg, false);
                out.push(env.state());
            }
        }
    }
    out
}
