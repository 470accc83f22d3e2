//! On-disk formats: model JSON, dataset CSV, episode traces and run logs.

use std::io::{Read, Write};

use fracrl_core::glucose::TraceRow;
use fracrl_core::mbrl::RunRecord;
use fracrl_core::model::ModelError;
use fracrl_core::{EpisodeDataset, FracModel, Provenance, StateTrajectory};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("unsupported {what} version {got} (expected {expected})")]
    Version { what: &'static str, got: u32, expected: u32 },
    #[error("invalid model: {0}")]
    Model(#[from] ModelError),
    #[error("line {line}: {message}")]
    Content { line: usize, message: String },
}

fn content(line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Content {
        line,
        message: message.into(),
    }
}

/// Serialized form of a [`FracModel`]; matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub version: u32,
    pub n: usize,
    pub p: usize,
    pub alphas: Vec<f64>,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    #[serde(rename = "B")]
    pub b: Vec<f64>,
    pub mu: Vec<f64>,
    #[serde(rename = "Sigma")]
    pub sigma: Vec<f64>,
}

impl ModelDoc {
    pub fn from_model(m: &FracModel) -> Self {
        Self {
            version: MODEL_VERSION,
            n: m.state_dim(),
            p: m.action_dim(),
            alphas: m.orders().as_slice().to_vec(),
            a: FracModel::row_major(m.a()),
            b: FracModel::row_major(m.b()),
            mu: m.mu().iter().copied().collect(),
            sigma: FracModel::row_major(m.sigma()),
        }
    }

    pub fn to_model(&self) -> Result<FracModel, FormatError> {
        if self.version != MODEL_VERSION {
            return Err(FormatError::Version {
                what: "model",
                got: self.version,
                expected: MODEL_VERSION,
            });
        }
        Ok(FracModel::from_flat(
            self.n,
            self.p,
            self.alphas.clone(),
            &self.a,
            &self.b,
            &self.mu,
            &self.sigma,
        )?)
    }
}

pub fn model_to_json(m: &FracModel) -> String {
    serde_json::to_string_pretty(&ModelDoc::from_model(m)).expect("model fields are finite")
}

pub fn model_from_json(text: &str) -> Result<FracModel, FormatError> {
    serde_json::from_str::<ModelDoc>(text)?.to_model()
}

fn parse_provenance(s: &str, line: usize) -> Result<Provenance, FormatError> {
    match s {
        "seed" => Ok(Provenance::Seed),
        "on-policy" => Ok(Provenance::OnPolicy),
        other => Err(content(line, format!("unknown provenance {other:?}"))),
    }
}

/// One row per state: `episode, provenance, step, t_seconds, s0.., a0..`.
/// The action cells of an episode's last state are empty.
pub fn write_dataset<W: Write>(data: &EpisodeDataset, out: W) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(out);
    let (n, p) = data.dims().unwrap_or((0, 0));
    let mut header = vec!["episode".to_string(), "provenance".into(), "step".into(), "t_seconds".into()];
    header.extend((0..n).map(|i| format!("s{i}")));
    header.extend((0..p).map(|c| format!("a{c}")));
    w.write_record(&header)?;
    for (e, ep) in data.episodes().iter().enumerate() {
        let t = &ep.trajectory;
        let dt = t.sampling_period();
        for k in 0..t.num_states() {
            let mut row = vec![
                e.to_string(),
                ep.provenance.as_str().to_string(),
                k.to_string(),
                (k as f64 * dt).to_string(),
            ];
            row.extend(t.state(k).iter().map(|v| v.to_string()));
            if k < t.num_transitions() {
                row.extend(t.action(k).iter().map(|v| v.to_string()));
            } else {
                row.extend((0..p).map(|_| String::new()));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

struct PendingEpisode {
    id: String,
    provenance: Provenance,
    states: Vec<f64>,
    actions: Vec<f64>,
    times: Vec<f64>,
    missing_action_at: Option<usize>,
}

pub fn read_dataset<R: Read>(input: R) -> Result<EpisodeDataset, FormatError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let n = header.iter().filter(|h| h.starts_with('s') && h[1..].parse::<usize>().is_ok()).count();
    let p = header.iter().filter(|h| h.starts_with('a') && h[1..].parse::<usize>().is_ok()).count();
    let fixed = ["episode", "provenance", "step", "t_seconds"];
    if header.len() != 4 + n + p || fixed.iter().zip(header.iter()).any(|(a, b)| *a != b) {
        return Err(content(1, "expected header episode,provenance,step,t_seconds,s0..,a0.."));
    }
    if n == 0 {
        return Err(content(1, "no state columns"));
    }
    let mut data = EpisodeDataset::new();
    let mut cur: Option<PendingEpisode> = None;
    let mut last_line = 1;
    for (idx, rec) in r.records().enumerate() {
        let line = idx + 2;
        last_line = line;
        let rec = rec?;
        let num = |i: usize| -> Result<f64, FormatError> {
            rec[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| content(line, format!("column {} is not a finite number", &header[i])))
        };
        let step: usize = rec[2].parse().map_err(|_| content(line, "step is not an integer"))?;
        let starts_new = cur.as_ref().map_or(true, |c| c.id != rec[0]);
        if starts_new {
            if let Some(done) = cur.take() {
                finish_episode(&mut data, done, n, p, line)?;
            }
            if step != 0 {
                return Err(content(line, "episodes must start at step 0"));
            }
            cur = Some(PendingEpisode {
                id: rec[0].to_string(),
                provenance: parse_provenance(&rec[1], line)?,
                states: Vec::new(),
                actions: Vec::new(),
                times: Vec::new(),
                missing_action_at: None,
            });
        }
        let ep = cur.as_mut().expect("set above");
        if step != ep.times.len() {
            return Err(content(line, "steps must be consecutive"));
        }
        if let Some(at) = ep.missing_action_at {
            return Err(content(line, format!("step {at} has no action but is not the last")));
        }
        ep.times.push(num(3)?);
        for i in 0..n {
            ep.states.push(num(4 + i)?);
        }
        let action_cells: Vec<&str> = (0..p).map(|c| &rec[4 + n + c]).collect();
        if p > 0 && action_cells.iter().all(|c| c.is_empty()) {
            ep.missing_action_at = Some(step);
        } else {
            for c in 0..p {
                ep.actions.push(num(4 + n + c)?);
            }
        }
    }
    if let Some(done) = cur.take() {
        finish_episode(&mut data, done, n, p, last_line)?;
    }
    Ok(data)
}

fn finish_episode(
    data: &mut EpisodeDataset,
    ep: PendingEpisode,
    n: usize,
    p: usize,
    line: usize,
) -> Result<(), FormatError> {
    let k = ep.times.len();
    if ep.missing_action_at != Some(k - 1) && p > 0 {
        return Err(content(line, format!("episode {} must end with a state without action", ep.id)));
    }
    if k < 2 {
        return Err(content(line, format!("episode {} has a single state", ep.id)));
    }
    let dt = ep.times[1] - ep.times[0];
    if !(dt > 0.0) {
        return Err(content(line, format!("episode {} has non-increasing time", ep.id)));
    }
    let traj = StateTrajectory::from_parts(n, p, ep.states, ep.actions, dt)
        .map_err(|e| content(line, e.to_string()))?;
    data.push(traj, ep.provenance)
        .map_err(|e| content(line, e.to_string()))
}

pub fn write_trace<W: Write>(rows: &[TraceRow], out: W) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t_seconds", "bg_mgdl", "insulin_units", "meal_g"])?;
    for r in rows {
        w.write_record([r.t_s.to_string(), r.bg.to_string(), r.insulin.to_string(), r.meal_g.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub const RUNLOG_HEADER: [&str; 8] = [
    "iteration",
    "model_checksum",
    "episode_return",
    "tir_below",
    "tir_within",
    "tir_above",
    "qp_failures",
    "qp_inaccurate",
];

pub fn write_runlog<W: Write>(records: &[RunRecord], out: W) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RUNLOG_HEADER)?;
    for r in records {
        w.write_record([
            r.iteration.to_string(),
            format!("{:016x}", r.model_checksum),
            r.episode_return.to_string(),
            r.tir.below.to_string(),
            r.tir.within.to_string(),
            r.tir.above.to_string(),
            r.qp_failures.to_string(),
            r.qp_inaccurate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `(iteration, time in range)` pairs of a run log.
pub fn read_runlog_tir<R: Read>(input: R) -> Result<Vec<(usize, f64)>, FormatError> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().ne(RUNLOG_HEADER) {
        return Err(content(1, "not a run log"));
    }
    let mut out = Vec::new();
    for (idx, rec) in r.records().enumerate() {
        let rec = rec?;
        let it = rec[0].parse().map_err(|_| content(idx + 2, "bad iteration"))?;
        let tir = rec[4].parse().map_err(|_| content(idx + 2, "bad tir_within"))?;
        out.push((it, tir));
    }
    Ok(out)
}
