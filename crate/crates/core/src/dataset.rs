//! Transition datasets: the planar pushing state/action layout, tagged
//! collections of transitions, JSONL persistence, and marginal extraction.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// File format version written into every JSONL header line.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("unknown state coordinate `{0}`")]
    UnknownCoordinate(String),
}

/// Wraps an angle into (-pi, pi]. Values already in range pass through
/// bit-exactly; callers rely on that for no-op steps.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    if a > -PI && a <= PI {
        return a;
    }
    // PI - rem_euclid keeps the closed end of the interval at +pi.
    let r = (PI - a).rem_euclid(TAU);
    PI - r
}

/// Planar pushing state: block pose plus effector position, meters and
/// radians, yaw wrapped to (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub block_x: f64,
    pub block_y: f64,
    pub block_yaw: f64,
    pub effector_x: f64,
    pub effector_y: f64,
}

impl EnvState {
    pub fn to_array(self) -> [f64; 5] {
        [
            self.block_x,
            self.block_y,
            self.block_yaw,
            self.effector_x,
            self.effector_y,
        ]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        EnvState {
            block_x: a[0],
            block_y: a[1],
            block_yaw: a[2],
            effector_x: a[3],
            effector_y: a[4],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn coord(&self, c: StateCoord) -> f64 {
        self.to_array()[c.index()]
    }
}

/// Commanded effector displacement for one step, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvAction {
    pub dx: f64,
    pub dy: f64,
}

impl EnvAction {
    pub fn clamped(self, a_max: f64) -> EnvAction {
        EnvAction {
            dx: self.dx.clamp(-a_max, a_max),
            dy: self.dy.clamp(-a_max, a_max),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite()
    }

    pub fn norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

/// One observed step: state, commanded action, successor state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: EnvState,
    pub action: EnvAction,
    pub next_state: EnvState,
}

impl Transition {
    pub fn is_finite(&self) -> bool {
        self.state.is_finite() && self.action.is_finite() && self.next_state.is_finite()
    }
}

/// Origin of a dataset: collected in the real(-proxy) system or replayed
/// through the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataTag {
    Real,
    Sim,
}

impl fmt::Display for DataTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataTag::Real => write!(f, "real"),
            DataTag::Sim => write!(f, "sim"),
        }
    }
}

/// Names for the five state components, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateCoord {
    BlockX,
    BlockY,
    BlockYaw,
    EffectorX,
    EffectorY,
}

impl StateCoord {
    pub const ALL: [StateCoord; 5] = [
        StateCoord::BlockX,
        StateCoord::BlockY,
        StateCoord::BlockYaw,
        StateCoord::EffectorX,
        StateCoord::EffectorY,
    ];

    pub fn index(self) -> usize {
        match self {
            StateCoord::BlockX => 0,
            StateCoord::BlockY => 1,
            StateCoord::BlockYaw => 2,
            StateCoord::EffectorX => 3,
            StateCoord::EffectorY => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StateCoord::BlockX => "block_x",
            StateCoord::BlockY => "block_y",
            StateCoord::BlockYaw => "block_yaw",
            StateCoord::EffectorX => "effector_x",
            StateCoord::EffectorY => "effector_y",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DatasetError> {
        StateCoord::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| DatasetError::UnknownCoordinate(s.to_string()))
    }
}

impl fmt::Display for StateCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Target pose for a pushing task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2Target {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

/// A tagged collection of transitions from one collection round.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tag: DataTag,
    pub iteration: u32,
    pub transitions: Vec<Transition>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    tag: DataTag,
    iteration: u32,
    schema_version: u32,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    s: [f64; 5],
    a: [f64; 2],
    s_next: [f64; 5],
}

impl Dataset {
    pub fn new(tag: DataTag, iteration: u32) -> Self {
        Dataset {
            tag,
            iteration,
            transitions: Vec::new(),
        }
    }

    /// Builds a dataset, rejecting non-finite entries.
    pub fn from_transitions(
        tag: DataTag,
        iteration: u32,
        transitions: Vec<Transition>,
    ) -> Result<Self, DatasetError> {
        for t in &transitions {
            if !t.is_finite() {
                return Err(DatasetError::NonFinite {
                    context: "transition",
                });
            }
        }
        Ok(Dataset {
            tag,
            iteration,
            transitions,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Returns a copy with the transition appended; non-finite input is an
    /// error. The receiver is never modified.
    #[must_use = "append returns the extended dataset; the receiver is unchanged"]
    pub fn append(&self, t: Transition) -> Result<Dataset, DatasetError> {
        if !t.is_finite() {
            return Err(DatasetError::NonFinite {
                context: "transition",
            });
        }
        let mut out = self.clone();
        out.transitions.push(t);
        Ok(out)
    }

    /// Successor-state marginals: one row per transition, one column per
    /// requested coordinate. Replay keeps states and actions bit-identical,
    /// so successor coordinates are the only axis along which a real dataset
    /// and its simulated replay can differ.
    pub fn marginal(&self, coords: &[StateCoord]) -> Vec<Vec<f64>> {
        self.transitions
            .iter()
            .map(|t| coords.iter().map(|c| t.next_state.coord(*c)).collect())
            .collect()
    }

    /// Single-coordinate successor marginal as a flat column.
    pub fn marginal_column(&self, coord: StateCoord) -> Vec<f64> {
        self.transitions
            .iter()
            .map(|t| t.next_state.coord(coord))
            .collect()
    }

    /// Writes header plus one record per line. JSON floats round-trip
    /// bit-exactly, so save followed by load reproduces the dataset.
    pub fn save_jsonl(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = HeaderLine {
            tag: self.tag,
            iteration: self.iteration,
            schema_version: SCHEMA_VERSION,
        };
        writeln!(
            w,
            "{}",
            serde_json::to_string(&header).expect("header serializes")
        )?;
        for (i, t) in self.transitions.iter().enumerate() {
            if !t.is_finite() {
                return Err(DatasetError::NonFinite {
                    context: "transition",
                });
            }
            let _ = i;
            let rec = RecordLine {
                s: t.state.to_array(),
                a: [t.action.dx, t.action.dy],
                s_next: t.next_state.to_array(),
            };
            writeln!(
                w,
                "{}",
                serde_json::to_string(&rec).expect("record serializes")
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Dataset, DatasetError> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let header_text = match lines.next() {
            Some(l) => l?,
            None => {
                return Err(DatasetError::Schema {
                    line: 1,
                    msg: "missing header line".to_string(),
                })
            }
        };
        let header: HeaderLine = serde_json::from_str(&header_text)
            .map_err(|source| DatasetError::Parse { line: 1, source })?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::Schema {
                line: 1,
                msg: format!(
                    "unsupported schema_version {} (expected {})",
                    header.schema_version, SCHEMA_VERSION
                ),
            });
        }
        let mut transitions = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line = line?;
            let line_no = idx + 2;
            if line.trim().is_empty() {
                return Err(DatasetError::Schema {
                    line: line_no,
                    msg: "blank line inside dataset".to_string(),
                });
            }
            let rec: RecordLine = serde_json::from_str(&line)
                .map_err(|source| DatasetError::Parse { line: line_no, source })?;
            transitions.push(Transition {
                state: EnvState::from_array(rec.s),
                action: EnvAction {
                    dx: rec.a[0],
                    dy: rec.a[1],
                },
                next_state: EnvState::from_array(rec.s_next),
            });
        }
        Ok(Dataset {
            tag: header.tag,
            iteration: header.iteration,
            transitions,
        })
    }
}
