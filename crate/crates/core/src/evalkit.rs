//! Policy evaluation, the forgetting metric, and CSV/PNG report output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::DriftPoint;
use crate::agent::{derive_seed, Agent, AgentError};
use crate::env::{make_env, sample_com_transfer_domain, DomainParams, DomainRanges, EnvConfig, EnvError, TaskKind};
use crate::rssm::{RssmError, SequenceBatch, WorldModel};

pub const CSV_HEADER: &str = "run_id,task,difficulty,seed,trial,reward,success,steps";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("at least one trial is required")]
    NoTrials,
    #[error("at least one seed is required")]
    NoSeeds,
    #[error("no reports to emit")]
    EmptyReports,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

/// How evaluation episodes draw their dynamics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum DomainSpec {
    Source { ranges: DomainRanges },
    /// Source ranges with the centre of mass pushed outward by `delta`.
    ComTransfer { ranges: DomainRanges, delta: f64 },
    Fixed { params: DomainParams },
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec::Source {
            ranges: DomainRanges::default(),
        }
    }
}

impl DomainSpec {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DomainParams {
        match self {
            DomainSpec::Source { ranges } => ranges.sample(rng),
            DomainSpec::ComTransfer { ranges, delta } => sample_com_transfer_domain(rng, ranges, *delta),
            DomainSpec::Fixed { params } => *params,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskPoint {
    pub task: TaskKind,
    pub difficulty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub tasks: Vec<TaskPoint>,
    /// Episodes per task and seed.
    pub trials: usize,
    pub seeds: Vec<u64>,
    pub domain: DomainSpec,
    pub env: EnvConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub run_id: String,
    pub task: TaskKind,
    pub difficulty: f64,
    pub seed: u64,
    pub trial: usize,
    pub reward: f64,
    pub success: bool,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: TaskKind,
    pub difficulty: f64,
    pub trials: usize,
    pub mean_reward: f64,
    /// Population standard deviation over trials.
    pub std_reward: f64,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub records: Vec<TrialRecord>,
    pub summaries: Vec<TaskSummary>,
    pub drift_curve: Vec<DriftPoint>,
    pub forgetting: Option<f64>,
    /// x-coordinate for sweep plots, e.g. the number of target episodes.
    pub sweep_value: Option<f64>,
}

impl EvalReport {
    pub fn new(run_id: impl Into<String>, config_digest: impl Into<String>, seeds: Vec<u64>, records: Vec<TrialRecord>) -> Self {
        let summaries = summarize(&records);
        Self {
            run_id: run_id.into(),
            config_digest: config_digest.into(),
            seeds,
            records,
            summaries,
            drift_curve: Vec::new(),
            forgetting: None,
            sweep_value: None,
        }
    }

    pub fn summary(&self, task: TaskKind, difficulty: f64) -> Option<&TaskSummary> {
        self.summaries
            .iter()
            .find(|s| s.task == task && s.difficulty == difficulty)
    }

    /// Success rate over every trial in the report.
    pub fn overall_success(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.success).count() as f64 / self.records.len() as f64
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Groups records by (task, difficulty) in order of first appearance.
pub fn summarize(records: &[TrialRecord]) -> Vec<TaskSummary> {
    let mut order: Vec<(TaskKind, f64)> = Vec::new();
    for r in records {
        if !order.iter().any(|&(t, d)| t == r.task && d == r.difficulty) {
            order.push((r.task, r.difficulty));
        }
    }
    order
        .into_iter()
        .map(|(task, difficulty)| {
            let rows: Vec<&TrialRecord> = records
                .iter()
                .filter(|r| r.task == task && r.difficulty == difficulty)
                .collect();
            let rewards: Vec<f64> = rows.iter().map(|r| r.reward).collect();
            let (mean_reward, std_reward) = mean_std(&rewards);
            TaskSummary {
                task,
                difficulty,
                trials: rows.len(),
                mean_reward,
                std_reward,
                success_rate: rows.iter().filter(|r| r.success).count() as f64 / rows.len() as f64,
            }
        })
        .collect()
}

/// Result of one deterministic-policy episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeResult {
    pub reward: f64,
    pub success: bool,
    pub steps: usize,
    /// Sum of the velocity-tracking term alone.
    pub tracking: f64,
}

/// Runs one episode with the policy mean. `seed` fixes the domain draw, the
/// environment stream and the latent samples.
pub fn run_episode(agent: &Agent, task: TaskPoint, domain: &DomainSpec, env: &EnvConfig, seed: u64) -> Result<EpisodeResult, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = domain.sample(&mut rng);
    let mut e = make_env(task.task, task.difficulty, params, rng.random(), env)?;
    let mut obs = e.observation();
    let mut state = agent.begin(1);
    let mut res = EpisodeResult {
        reward: 0.0,
        success: false,
        steps: 0,
        tracking: 0.0,
    };
    loop {
        let out = agent.act(&mut state, std::slice::from_ref(&obs), &mut rng, true)?;
        let a = out.actions.row(0);
        let step = e.step([a[0], a[1]])?;
        res.reward += step.reward;
        res.tracking += step.info.tracking_reward;
        res.steps += 1;
        obs = step.observation;
        if step.done {
            res.success = step.info.success;
            return Ok(res);
        }
    }
}

/// Deterministic rollouts over every (task, seed, trial). Trials run in
/// parallel; results are assembled in a fixed order.
pub fn evaluate_policy(
    run_id: &str,
    config_digest: &str,
    agent: &Agent,
    settings: &EvalSettings,
) -> Result<EvalReport, EvalError> {
    if settings.trials == 0 {
        return Err(EvalError::NoTrials);
    }
    if settings.seeds.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    let mut jobs = Vec::new();
    for (ti, &task) in settings.tasks.iter().enumerate() {
        for &seed in &settings.seeds {
            for trial in 0..settings.trials {
                jobs.push((ti, task, seed, trial));
            }
        }
    }
    let records = jobs
        .par_iter()
        .map(|&(ti, task, seed, trial)| {
            let s = derive_seed(&[seed, ti as u64, trial as u64]);
            let r = run_episode(agent, task, &settings.domain, &settings.env, s)?;
            Ok(TrialRecord {
                run_id: run_id.to_string(),
                task: task.task,
                difficulty: task.difficulty,
                seed,
                trial,
                reward: r.reward,
                success: r.success,
                steps: r.steps,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(EvalReport::new(run_id, config_digest, settings.seeds.clone(), records))
}

/// Mean held-out reconstruction NLL of `after` minus that of `before`.
/// Positive values mean the source domain got worse.
pub fn forgetting_metric(before: &WorldModel, after: &WorldModel, heldout: &[SequenceBatch]) -> Result<f64, RssmError> {
    if heldout.is_empty() {
        return Err(RssmError::Config("forgetting metric needs held-out batches".into()));
    }
    let mut diff = 0.0;
    for b in heldout {
        diff += after.reconstruction_nll(b)? - before.reconstruction_nll(b)?;
    }
    Ok(diff / heldout.len() as f64)
}

pub fn records_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports.iter().flat_map(|r| &r.records) {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.run_id,
            r.task,
            r.difficulty,
            r.seed,
            r.trial,
            r.reward,
            u8::from(r.success),
            r.steps
        );
    }
    s
}

/// Parses rows written by [`records_csv`].
pub fn parse_records_csv(text: &str) -> Result<Vec<TrialRecord>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err("missing or unexpected header".into());
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return Err(format!("expected 8 fields: {l}"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s}: {e}"));
            let int = |s: &str| s.parse::<u64>().map_err(|e| format!("{s}: {e}"));
            Ok(TrialRecord {
                run_id: f[0].to_string(),
                task: f[1].parse().map_err(|e: EnvError| e.to_string())?,
                difficulty: num(f[2])?,
                seed: int(f[3])?,
                trial: int(f[4])? as usize,
                reward: num(f[5])?,
                success: f[6] == "1",
                steps: int(f[7])? as usize,
            })
        })
        .collect()
}

const W: u32 = 640;
const H: u32 = 360;
const MARGIN: u32 = 30;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

fn canvas() -> RgbImage {
    RgbImage::from_pixel(W, H, Rgb([255, 255, 255]))
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
    let (xa, xb) = (x0.min(x1).max(0), x0.max(x1).min(W as i64 - 1));
    let (ya, yb) = (y0.min(y1).max(0), y0.max(y1).min(H as i64 - 1));
    for y in ya..=yb {
        for x in xa..=xb {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for k in 0..=n {
        let t = k as f64 / n as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        fill_rect(img, x.round() as i64 - 1, y.round() as i64 - 1, x.round() as i64 + 1, y.round() as i64 + 1, c);
    }
}

/// Bars grouped by task point, one colour per report. Values share a zero
/// baseline.
fn bar_chart(reports: &[EvalReport], value: impl Fn(&TaskSummary) -> f64) -> RgbImage {
    let mut img = canvas();
    let mut groups: Vec<(TaskKind, f64)> = Vec::new();
    for s in reports.iter().flat_map(|r| &r.summaries) {
        if !groups.iter().any(|&(t, d)| t == s.task && d == s.difficulty) {
            groups.push((s.task, s.difficulty));
        }
    }
    let vals: Vec<Vec<f64>> = reports
        .iter()
        .map(|r| groups.iter().map(|&(t, d)| r.summary(t, d).map_or(0.0, &value)).collect())
        .collect();
    let lo = vals.iter().flatten().fold(0.0f64, |a, &b| a.min(b));
    let hi = vals.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    let span = (hi - lo).max(1e-12);
    let plot_h = (H - 2 * MARGIN) as f64;
    let y_of = |v: f64| MARGIN as f64 + (hi - v) / span * plot_h;
    let group_w = (W - 2 * MARGIN) as f64 / groups.len().max(1) as f64;
    let bar_w = group_w * 0.8 / reports.len() as f64;
    for (ri, rv) in vals.iter().enumerate() {
        let c = Rgb(PALETTE[ri % PALETTE.len()]);
        for (gi, &v) in rv.iter().enumerate() {
            let x0 = MARGIN as f64 + gi as f64 * group_w + group_w * 0.1 + ri as f64 * bar_w;
            fill_rect(&mut img, x0 as i64, y_of(0.0) as i64, (x0 + bar_w - 1.0) as i64, y_of(v) as i64, c);
        }
    }
    let black = Rgb([0, 0, 0]);
    line(&mut img, (MARGIN as f64, y_of(0.0)), ((W - MARGIN) as f64, y_of(0.0)), black);
    line(&mut img, (MARGIN as f64, MARGIN as f64), (MARGIN as f64, (H - MARGIN) as f64), black);
    img
}

/// Success rate against each report's sweep value.
fn sweep_curve(points: &[(f64, f64)]) -> RgbImage {
    let mut img = canvas();
    let (xlo, xhi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(x, _)| (a.min(x), b.max(x)));
    let xspan = (xhi - xlo).max(1e-12);
    let to_px = |(x, y): (f64, f64)| {
        (
            MARGIN as f64 + (x - xlo) / xspan * (W - 2 * MARGIN) as f64,
            (H - MARGIN) as f64 - y.clamp(0.0, 1.0) * (H - 2 * MARGIN) as f64,
        )
    };
    let black = Rgb([0, 0, 0]);
    line(&mut img, to_px((xlo, 0.0)), to_px((xhi, 0.0)), black);
    line(&mut img, to_px((xlo, 0.0)), to_px((xlo, 1.0)), black);
    let c = Rgb(PALETTE[0]);
    for w in points.windows(2) {
        line(&mut img, to_px(w[0]), to_px(w[1]), c);
    }
    for &p in points {
        let (x, y) = to_px(p);
        fill_rect(&mut img, x as i64 - 3, y as i64 - 3, x as i64 + 3, y as i64 + 3, c);
    }
    img
}

/// Writes `eval.csv` (the source of truth) and derived images into `dir`.
/// Returns the written paths.
pub fn emit_plots(reports: &[EvalReport], dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::EmptyReports);
    }
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    let csv = dir.join("eval.csv");
    std::fs::write(&csv, records_csv(reports))?;
    out.push(csv);

    if reports.iter().any(|r| !r.drift_curve.is_empty()) {
        let mut s = String::from("run_id,step,mean_cosine,drift\n");
        for r in reports {
            for p in &r.drift_curve {
                let _ = writeln!(s, "{},{},{},{}", r.run_id, p.step, p.mean_cosine, p.drift);
            }
        }
        let p = dir.join("drift.csv");
        std::fs::write(&p, s)?;
        out.push(p);
    }

    let p = dir.join("reward_bars.png");
    bar_chart(reports, |s| s.mean_reward).save(&p)?;
    out.push(p);
    let p = dir.join("success_bars.png");
    bar_chart(reports, |s| s.success_rate).save(&p)?;
    out.push(p);

    let mut sweep: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for r in reports {
        if let Some(x) = r.sweep_value {
            sweep.insert(x.to_bits(), (x, r.overall_success()));
        }
    }
    if sweep.len() >= 2 {
        let mut pts: Vec<(f64, f64)> = sweep.into_values().collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let p = dir.join("success_vs_sweep.png");
        sweep_curve(&pts).save(&p)?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(task: TaskKind, d: f64, trial: usize, reward: f64, success: bool) -> TrialRecord {
        TrialRecord {
            run_id: "r".into(),
            task,
            difficulty: d,
            seed: 0,
            trial,
            reward,
            success,
            steps: 10,
        }
    }

    #[test]
    fn counting_success() {
        let rows: Vec<_> = (0..10).map(|i| rec(TaskKind::Flat, 0.0, i, 1.0, true)).collect();
        let s = summarize(&rows);
        assert_eq!(s[0].success_rate, 1.0);
        assert_eq!(s[0].trials, 10);
        assert_eq!(s[0].std_reward, 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            rec(TaskKind::Crawl, 0.23, 0, -1.0 / 3.0, false),
            rec(TaskKind::Crawl, 0.23, 1, 2.5e-17, true),
        ];
        let r = EvalReport::new("r", "d", vec![0], rows.clone());
        let back = parse_records_csv(&records_csv(&[r])).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn empty_reports_write_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("out");
        assert!(matches!(emit_plots(&[], &target), Err(EvalError::EmptyReports)));
        assert!(!target.exists());
    }
}
