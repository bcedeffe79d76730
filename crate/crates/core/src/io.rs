//! File formats for run artifacts.
//!
//! Trajectories go to CSV for plotting or to a compact little-endian binary
//! format ([`write_trajectories_bin`] / [`read_trajectories_bin`]) that
//! round-trips states, the time grid, and per-step boundary contact
//! magnitudes. Point clouds and weighted measures use plain CSV. Structured
//! per-iteration records append to JSONL via [`write_jsonl`]. Trained field
//! pairs persist as a [`Checkpoint`]: a single JSON header line followed by
//! raw parameter blocks.

use crate::scorenet::{FieldNet, Mlp};
use crate::sde::{HitRecord, TimeGrid, Trajectory};
use crate::training::{BridgeNets, TrainOutcome};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Leading bytes of the binary trajectory format.
pub const TRAJ_MAGIC: &[u8; 8] = b"RSBTRAJ1";
/// Magic string in the checkpoint header line.
pub const CHECKPOINT_MAGIC: &str = "rsb-checkpoint-v1";

pub type Result<T> = std::result::Result<T, IoError>;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Format(String),
}

fn format_err(msg: impl Into<String>) -> IoError {
    IoError::Format(msg.into())
}

fn parse_err(line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse {
        line,
        msg: msg.into(),
    }
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// Write trajectories as CSV with columns
/// `path,step,t,x1..xd,dl`.
///
/// `dl` on row `k` is the local time accumulated during the transition that
/// starts at grid point `k`; the final row of each path carries `0`. Blank
/// lines separate paths so gnuplot treats them as separate curves.
pub fn write_trajectories_csv(path: impl AsRef<Path>, trajs: &[Trajectory]) -> Result<()> {
    let dim = common_dim(trajs)?;
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "path,step,t")?;
    for j in 1..=dim {
        write!(w, ",x{j}")?;
    }
    writeln!(w, ",dl")?;
    for (p, traj) in trajs.iter().enumerate() {
        if p > 0 {
            writeln!(w)?;
        }
        let ts = traj.grid.points();
        for (k, state) in traj.states.iter().enumerate() {
            write!(w, "{p},{k},{}", ts[k])?;
            for v in state {
                write!(w, ",{v}")?;
            }
            let dl = traj
                .hits
                .get(k)
                .and_then(|h| h.as_ref())
                .map_or(0.0, |h| h.local_time);
            writeln!(w, ",{dl}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Write trajectories in the compact binary format.
///
/// Layout, all little-endian: the magic bytes, then `n_paths`, `n_steps`,
/// and `dim` as `u64`, then the `n_steps + 1` grid times as `f64`, then per
/// path the `(n_steps + 1) * dim` state coordinates followed by `n_steps`
/// local-time values (`0` marks a transition without boundary contact).
/// Contact geometry (hit point and normal) is not stored.
///
/// All trajectories must share one grid and dimension.
pub fn write_trajectories_bin(path: impl AsRef<Path>, trajs: &[Trajectory]) -> Result<()> {
    let dim = common_dim(trajs)?;
    let grid = trajs[0].grid.points();
    for traj in &trajs[1..] {
        if traj.grid.points() != grid {
            return Err(format_err("trajectories use different time grids"));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TRAJ_MAGIC)?;
    for n in [trajs.len() as u64, (grid.len() - 1) as u64, dim as u64] {
        w.write_all(&n.to_le_bytes())?;
    }
    for t in grid {
        w.write_all(&t.to_le_bytes())?;
    }
    for traj in trajs {
        for state in &traj.states {
            for v in state {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for hit in &traj.hits {
            let dl = hit.as_ref().map_or(0.0, |h| h.local_time);
            w.write_all(&dl.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read trajectories written by [`write_trajectories_bin`].
///
/// Transitions with a stored local time become hits with empty boundary and
/// normal vectors, since the compact format keeps magnitudes only.
pub fn read_trajectories_bin(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| format_err("file too short for a trajectory header"))?;
    if &magic != TRAJ_MAGIC {
        return Err(format_err("bad magic: not a trajectory file"));
    }
    let n_paths = read_u64(&mut r)? as usize;
    let n_steps = read_u64(&mut r)? as usize;
    let dim = read_u64(&mut r)? as usize;
    if n_steps == 0 || dim == 0 {
        return Err(format_err("trajectory header has zero steps or dimension"));
    }
    let mut times = vec![0.0; n_steps + 1];
    read_f64_into(&mut r, &mut times)?;
    let grid = TimeGrid::from_points(times).map_err(|e| format_err(e.to_string()))?;
    let mut trajs = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        let mut states = Vec::with_capacity(n_steps + 1);
        for _ in 0..=n_steps {
            let mut x = vec![0.0; dim];
            read_f64_into(&mut r, &mut x)?;
            states.push(x);
        }
        let mut dls = vec![0.0; n_steps];
        read_f64_into(&mut r, &mut dls)?;
        let hits = dls
            .into_iter()
            .map(|dl| {
                (dl != 0.0).then(|| HitRecord {
                    boundary: Vec::new(),
                    normal: Vec::new(),
                    local_time: dl,
                    fallback: false,
                })
            })
            .collect();
        trajs.push(Trajectory {
            grid: grid.clone(),
            states,
            hits,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(format_err("trailing bytes after the last trajectory"));
    }
    Ok(trajs)
}

fn common_dim(trajs: &[Trajectory]) -> Result<usize> {
    let dim = trajs
        .first()
        .and_then(|t| t.states.first())
        .map(Vec::len)
        .ok_or_else(|| format_err("no trajectories to write"))?;
    for traj in trajs {
        if traj.states.iter().any(|s| s.len() != dim) {
            return Err(format_err("trajectories have mixed dimensions"));
        }
    }
    Ok(dim)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| format_err("truncated trajectory file"))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64_into(r: &mut impl Read, out: &mut [f64]) -> Result<()> {
    let mut buf = [0u8; 8];
    for v in out {
        r.read_exact(&mut buf)
            .map_err(|_| format_err("truncated trajectory file"))?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Point clouds and weighted measures
// ---------------------------------------------------------------------------

/// Write a point cloud as CSV with header `x1..xd`.
pub fn write_cloud_csv(path: impl AsRef<Path>, points: &[Vec<f64>]) -> Result<()> {
    let dim = points
        .first()
        .map(Vec::len)
        .ok_or_else(|| format_err("no points to write"))?;
    if points.iter().any(|p| p.len() != dim) {
        return Err(format_err("points have mixed dimensions"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (1..=dim).map(|j| format!("x{j}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for p in points {
        let row: Vec<String> = p.iter().map(f64::to_string).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a weighted measure from CSV.
///
/// Every row must have the same number of comma-separated numeric fields. A
/// header row is optional; when present and its last column is named `w` or
/// `weight`, that column holds weights, which must be finite, non-negative,
/// and not all zero. Files without such a column yield uniform `None`
/// weights. Malformed numbers and ragged rows are reported with their line
/// number.
pub fn read_measure_csv(path: impl AsRef<Path>) -> Result<(Vec<Vec<f64>>, Option<Vec<f64>>)> {
    let r = BufReader::new(File::open(path)?);
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut has_weights = false;
    let mut width = None;
    for (idx, line) in r.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if idx == 0 && fields.iter().any(|f| f.parse::<f64>().is_err()) {
            has_weights = fields
                .last()
                .is_some_and(|f| f.eq_ignore_ascii_case("w") || f.eq_ignore_ascii_case("weight"));
            width = Some(fields.len());
            continue;
        }
        match width {
            None => width = Some(fields.len()),
            Some(n) if n != fields.len() => {
                return Err(parse_err(
                    lineno,
                    format!("expected {n} fields, found {}", fields.len()),
                ));
            }
            Some(_) => {}
        }
        let mut row = Vec::with_capacity(fields.len());
        for f in &fields {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad number {f:?}")))?;
            row.push(v);
        }
        if has_weights {
            let wv = row.pop().expect("weight column present");
            if !wv.is_finite() || wv < 0.0 {
                return Err(parse_err(lineno, format!("bad weight {wv}")));
            }
            weights.push(wv);
        }
        points.push(row);
    }
    if points.is_empty() {
        return Err(format_err("measure file has no data rows"));
    }
    if points[0].is_empty() {
        return Err(format_err("measure rows have no coordinate columns"));
    }
    if has_weights {
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(format_err("weights sum to zero"));
        }
        Ok((points, Some(weights)))
    } else {
        Ok((points, None))
    }
}

/// Write a row-major `n x m` matrix as CSV without a header.
pub fn write_matrix_csv(path: impl AsRef<Path>, data: &[f64], n: usize, m: usize) -> Result<()> {
    if data.len() != n * m {
        return Err(format_err(format!(
            "matrix data has {} entries, want {n}x{m}",
            data.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    for row in data.chunks(m) {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

/// Write one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| format_err(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    magic: String,
    widths: Vec<usize>,
    param_count: usize,
    blocks: Vec<String>,
    meta: Value,
}

/// A trained field pair with its parameter-averaged copy and free-form
/// run metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub nets: BridgeNets,
    pub ema: BridgeNets,
    pub meta: Value,
}

const CHECKPOINT_BLOCKS: [&str; 4] = ["forward", "backward", "ema_forward", "ema_backward"];

impl Checkpoint {
    pub fn from_outcome(outcome: &TrainOutcome, meta: Value) -> Self {
        Checkpoint {
            nets: outcome.nets.clone(),
            ema: outcome.ema.clone(),
            meta,
        }
    }

    pub fn widths(&self) -> &[usize] {
        self.nets.forward.net.widths()
    }

    /// Save as one JSON header line followed by the four raw little-endian
    /// parameter blocks named in the header.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let widths = self.widths().to_vec();
        let blocks = [
            &self.nets.forward,
            &self.nets.backward,
            &self.ema.forward,
            &self.ema.backward,
        ];
        for net in blocks {
            if net.net.widths() != widths {
                return Err(format_err("checkpoint fields have mixed layer widths"));
            }
        }
        let header = CheckpointHeader {
            magic: CHECKPOINT_MAGIC.into(),
            widths,
            param_count: blocks[0].net.params.len(),
            blocks: CHECKPOINT_BLOCKS.iter().map(|s| s.to_string()).collect(),
            meta: self.meta.clone(),
        };
        let mut w = BufWriter::new(File::create(path)?);
        let line = serde_json::to_string(&header).map_err(|e| format_err(e.to_string()))?;
        writeln!(w, "{line}")?;
        for net in blocks {
            for v in &net.net.params {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())
            .map_err(|e| format_err(format!("bad checkpoint header: {e}")))?;
        if header.magic != CHECKPOINT_MAGIC {
            return Err(format_err("bad magic: not a checkpoint file"));
        }
        if header.blocks != CHECKPOINT_BLOCKS {
            return Err(format_err("unexpected checkpoint block list"));
        }
        let want = crate::scorenet::param_count(&header.widths);
        if header.param_count != want {
            return Err(format_err(format!(
                "header claims {} parameters, widths imply {want}",
                header.param_count
            )));
        }
        let mut read_net = || -> Result<FieldNet> {
            let mut params = vec![0.0; want];
            let mut buf = [0u8; 8];
            for v in &mut params {
                r.read_exact(&mut buf)
                    .map_err(|_| format_err("truncated checkpoint file"))?;
                *v = f64::from_le_bytes(buf);
            }
            let mlp =
                Mlp::with_params(&header.widths, params).map_err(|e| format_err(e.to_string()))?;
            FieldNet::new(mlp).map_err(|e| format_err(e.to_string()))
        };
        let nets = BridgeNets {
            forward: read_net()?,
            backward: read_net()?,
        };
        let ema = BridgeNets {
            forward: read_net()?,
            backward: read_net()?,
        };
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(format_err("trailing bytes after the last parameter block"));
        }
        Ok(Checkpoint {
            nets,
            ema,
            meta: header.meta,
        })
    }
}
