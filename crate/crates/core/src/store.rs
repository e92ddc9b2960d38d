//! Append-only episode log with parent-child lineage.
//!
//! Records form a six-level tree: Task → Cloud → PoseEst → Grasp → InHand →
//! Insertion. Every non-task record names a parent on the level directly above.
//!
//! On disk the log is line-oriented text. The first line is `storev1`; each
//! further line is one tab-separated record:
//!
//! ```text
//! task    <id> <object_id> <network_type>
//! cloud   <id> <task_id> <cloud_file> <timestamp_ms>
//! pose    <id> <cloud_id> <12 pose numbers> <score>
//! grasp   <id> <pose_est_id> <12 pose numbers> <0|1>
//! inhand  <id> <grasp_id> <12 measured> <12 expected>
//! insert  <id> <inhand_id> <0|1>
//! ```
//!
//! Poses are written as the rotation row by row followed by the translation,
//! every number with nine significant digits.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::geometry::Pose;
use crate::numfmt::{fmt_sig, quantize};

pub const MAGIC: &str = "storev1";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("record {child} refers to missing record {parent}")]
    Integrity { child: u64, parent: u64 },
    #[error("record {id}: parent {parent} is a {found} record, expected {expected}")]
    Schema { id: u64, parent: u64, expected: Level, found: Level },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record {0} not found")]
    NotFound(u64),
    #[error("{0} already exists")]
    WouldOverwrite(PathBuf),
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Task,
    Cloud,
    PoseEst,
    Grasp,
    InHand,
    Insertion,
}

impl Level {
    pub fn tag(self) -> &'static str {
        match self {
            Level::Task => "task",
            Level::Cloud => "cloud",
            Level::PoseEst => "pose",
            Level::Grasp => "grasp",
            Level::InHand => "inhand",
            Level::Insertion => "insert",
        }
    }

    pub fn parent(self) -> Option<Level> {
        match self {
            Level::Task => None,
            Level::Cloud => Some(Level::Task),
            Level::PoseEst => Some(Level::Cloud),
            Level::Grasp => Some(Level::PoseEst),
            Level::InHand => Some(Level::Grasp),
            Level::Insertion => Some(Level::InHand),
        }
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// A pose as persisted: twelve numbers already rounded to their text form, so
/// a record compares equal to itself after a save and load.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoredPose(pub [f64; 12]);

impl StoredPose {
    pub fn from_pose(p: &Pose) -> Self {
        Self(p.to_row_major().map(quantize))
    }

    /// The rounding leaves the rotation within ~1e-9 of orthonormal; it is
    /// projected back on conversion.
    pub fn to_pose(&self) -> Pose {
        Pose::from_row_major(&self.0).expect("stored rotation is close to orthonormal")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Task { object_id: String, network_type: String },
    Cloud { task_id: u64, cloud_file: String, timestamp_ms: u64 },
    PoseEst { cloud_id: u64, pose: StoredPose, score: f64 },
    Grasp { pose_est_id: u64, grasp_in_object_frame: StoredPose, succeeded: bool },
    InHand { grasp_id: u64, measured_pose: StoredPose, expected_pose: StoredPose },
    Insertion { inhand_id: u64, succeeded: bool },
}

impl Body {
    pub fn level(&self) -> Level {
        match self {
            Body::Task { .. } => Level::Task,
            Body::Cloud { .. } => Level::Cloud,
            Body::PoseEst { .. } => Level::PoseEst,
            Body::Grasp { .. } => Level::Grasp,
            Body::InHand { .. } => Level::InHand,
            Body::Insertion { .. } => Level::Insertion,
        }
    }

    pub fn parent_id(&self) -> Option<u64> {
        match self {
            Body::Task { .. } => None,
            Body::Cloud { task_id, .. } => Some(*task_id),
            Body::PoseEst { cloud_id, .. } => Some(*cloud_id),
            Body::Grasp { pose_est_id, .. } => Some(*pose_est_id),
            Body::InHand { grasp_id, .. } => Some(*grasp_id),
            Body::Insertion { inhand_id, .. } => Some(*inhand_id),
        }
    }

    /// Rounds every float to its persisted value.
    fn normalized(mut self) -> Self {
        if let Body::PoseEst { score, .. } = &mut self {
            *score = quantize(*score);
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: u64,
    pub body: Body,
}

impl Record {
    pub fn level(&self) -> Level {
        self.body.level()
    }

    pub fn parent_id(&self) -> Option<u64> {
        self.body.parent_id()
    }

    pub fn to_line(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{}\t{}", self.level().tag(), self.id);
        let pose = |s: &mut String, p: &StoredPose| {
            for v in p.0 {
                let _ = write!(s, "\t{}", fmt_sig(v));
            }
        };
        match &self.body {
            Body::Task { object_id, network_type } => {
                let _ = write!(s, "\t{object_id}\t{network_type}");
            }
            Body::Cloud { task_id, cloud_file, timestamp_ms } => {
                let _ = write!(s, "\t{task_id}\t{cloud_file}\t{timestamp_ms}");
            }
            Body::PoseEst { cloud_id, pose: p, score } => {
                let _ = write!(s, "\t{cloud_id}");
                pose(&mut s, p);
                let _ = write!(s, "\t{}", fmt_sig(*score));
            }
            Body::Grasp { pose_est_id, grasp_in_object_frame, succeeded } => {
                let _ = write!(s, "\t{pose_est_id}");
                pose(&mut s, grasp_in_object_frame);
                let _ = write!(s, "\t{}", *succeeded as u8);
            }
            Body::InHand { grasp_id, measured_pose, expected_pose } => {
                let _ = write!(s, "\t{grasp_id}");
                pose(&mut s, measured_pose);
                pose(&mut s, expected_pose);
            }
            Body::Insertion { inhand_id, succeeded } => {
                let _ = write!(s, "\t{inhand_id}\t{}", *succeeded as u8);
            }
        }
        s
    }

    pub fn parse_line(line: &str, line_no: usize) -> Result<Record, StoreError> {
        let err = |m: String| StoreError::Parse { line: line_no, message: m };
        let f: Vec<&str> = line.split('\t').collect();
        let expect_len = |n: usize| {
            if f.len() == n {
                Ok(())
            } else {
                Err(err(format!("`{}` record needs {} fields, found {}", f[0], n, f.len())))
            }
        };
        let int = |i: usize| f[i].parse::<u64>().map_err(|_| err(format!("field {} is not an id: `{}`", i + 1, f[i])));
        let float = |i: usize| -> Result<f64, StoreError> {
            f[i].parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("field {} is not a finite number: `{}`", i + 1, f[i])))
        };
        let flag = |i: usize| match f[i] {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(err(format!("field {} must be 0 or 1, found `{other}`", i + 1))),
        };
        let pose = |start: usize| -> Result<StoredPose, StoreError> {
            let mut v = [0.0; 12];
            for (k, slot) in v.iter_mut().enumerate() {
                *slot = float(start + k)?;
            }
            if Pose::from_row_major(&v).is_none() {
                return Err(err(format!("fields {}..{} are not a rigid pose", start + 1, start + 12)));
            }
            Ok(StoredPose(v))
        };
        let text = |i: usize| {
            if f[i].is_empty() || f[i].chars().any(char::is_whitespace) {
                Err(err(format!("field {} must be non-empty without whitespace", i + 1)))
            } else {
                Ok(f[i].to_string())
            }
        };
        if f.len() < 2 {
            return Err(err("too few fields".into()));
        }
        let body = match f[0] {
            "task" => {
                expect_len(4)?;
                Body::Task { object_id: text(2)?, network_type: text(3)? }
            }
            "cloud" => {
                expect_len(5)?;
                Body::Cloud { task_id: int(2)?, cloud_file: text(3)?, timestamp_ms: int(4)? }
            }
            "pose" => {
                expect_len(16)?;
                Body::PoseEst { cloud_id: int(2)?, pose: pose(3)?, score: float(15)? }
            }
            "grasp" => {
                expect_len(16)?;
                Body::Grasp { pose_est_id: int(2)?, grasp_in_object_frame: pose(3)?, succeeded: flag(15)? }
            }
            "inhand" => {
                expect_len(27)?;
                Body::InHand { grasp_id: int(2)?, measured_pose: pose(3)?, expected_pose: pose(15)? }
            }
            "insert" => {
                expect_len(4)?;
                Body::Insertion { inhand_id: int(2)?, succeeded: flag(3)? }
            }
            other => return Err(err(format!("unknown record tag `{other}`"))),
        };
        let id = int(1)?;
        if id == 0 {
            return Err(err("record ids start at 1".into()));
        }
        let rec = Record { id, body };
        if rec.to_line() != line {
            return Err(err("numbers are not in canonical nine-digit form".into()));
        }
        Ok(rec)
    }
}

/// Ancestor chain of an in-hand record, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Lineage {
    pub inhand: Record,
    pub grasp: Record,
    pub pose_est: Record,
    pub cloud: Record,
    pub task: Record,
}

impl Lineage {
    pub fn records(&self) -> [&Record; 5] {
        [&self.inhand, &self.grasp, &self.pose_est, &self.cloud, &self.task]
    }
}

/// In-memory view of the log, optionally mirrored to a file on every append.
#[derive(Debug, Default)]
pub struct EpisodeStore {
    records: Vec<Record>,
    by_id: HashMap<u64, usize>,
    children: HashMap<u64, Vec<usize>>,
    file: Option<File>,
    path: Option<PathBuf>,
}

impl EpisodeStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Creates a new log file. Refuses to replace an existing file.
    pub fn create(path: &Path) -> Result<Self, StoreError> {
        let mut file = match OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(StoreError::WouldOverwrite(path.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        };
        file.write_all(format!("{MAGIC}\n").as_bytes())?;
        file.sync_data()?;
        Ok(Self { file: Some(file), path: Some(path.to_path_buf()), ..Self::default() })
    }

    /// Reads a log. Syntax errors name their line; a final line without a
    /// newline is taken as an interrupted write and dropped with a warning.
    /// Parent references are not checked here; see [`EpisodeStore::check_integrity`].
    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let text = std::fs::read_to_string(path)?;
        let mut store = Self::parse(&text)?;
        store.path = Some(path.to_path_buf());
        Ok(store)
    }

    pub fn parse(text: &str) -> Result<Self, StoreError> {
        let mut store = Self::default();
        if text.is_empty() {
            return Ok(store);
        }
        let complete = text.ends_with('\n');
        let mut lines: Vec<&str> = text.split('\n').collect();
        // `split` leaves one trailing piece: empty for a complete file, the
        // interrupted record otherwise.
        let tail = lines.pop().unwrap_or_default();
        if !complete {
            if lines.is_empty() {
                log::warn!("store header is incomplete; treating the log as empty");
                return Ok(store);
            }
            log::warn!("dropping truncated final line {}: `{tail}`", lines.len() + 1);
        }
        if lines.first().copied() != Some(MAGIC) {
            return Err(StoreError::Parse { line: 1, message: format!("expected `{MAGIC}` header") });
        }
        let mut last_id = 0u64;
        for (i, line) in lines.iter().enumerate().skip(1) {
            let rec = Record::parse_line(line, i + 1)?;
            if rec.id <= last_id {
                return Err(StoreError::Parse {
                    line: i + 1,
                    message: format!("id {} does not increase on {last_id}", rec.id),
                });
            }
            last_id = rec.id;
            store.insert(rec);
        }
        Ok(store)
    }

    fn insert(&mut self, rec: Record) {
        let idx = self.records.len();
        if let Some(p) = rec.parent_id() {
            self.children.entry(p).or_default().push(idx);
        }
        self.by_id.insert(rec.id, idx);
        self.records.push(rec);
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn next_id(&self) -> u64 {
        self.records.last().map_or(1, |r| r.id + 1)
    }

    /// Validates the parent, assigns the next id and, for file-backed stores,
    /// writes the record before returning.
    pub fn append(&mut self, body: Body) -> Result<u64, StoreError> {
        let id = self.next_id();
        if let (Some(pid), Some(expected)) = (body.parent_id(), body.level().parent()) {
            let parent = self.get(pid).ok_or(StoreError::Integrity { child: id, parent: pid })?;
            if parent.level() != expected {
                return Err(StoreError::Schema { id, parent: pid, expected, found: parent.level() });
            }
        }
        if let Body::Task { object_id, network_type } = &body {
            for (name, v) in [("object_id", object_id), ("network_type", network_type)] {
                if v.is_empty() || v.chars().any(char::is_whitespace) {
                    return Err(StoreError::InvalidField(format!("{name} `{v}`")));
                }
            }
        }
        if let Body::Cloud { cloud_file, .. } = &body {
            if cloud_file.is_empty() || cloud_file.chars().any(char::is_whitespace) {
                return Err(StoreError::InvalidField(format!("cloud_file `{cloud_file}`")));
            }
        }
        let rec = Record { id, body: body.normalized() };
        if let Some(f) = self.file.as_mut() {
            let mut line = rec.to_line();
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        self.insert(rec);
        Ok(id)
    }

    pub fn get(&self, id: u64) -> Option<&Record> {
        self.by_id.get(&id).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn iter_level(&self, level: Level) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.level() == level)
    }

    /// Records whose parent is `id`, in append order.
    pub fn children(&self, id: u64) -> Result<Vec<&Record>, StoreError> {
        let rec = self.get(id).ok_or(StoreError::NotFound(id))?;
        if let Some(p) = rec.parent_id() {
            self.get(p).ok_or(StoreError::Integrity { child: id, parent: p })?;
        }
        Ok(self.children.get(&id).map(|v| v.iter().map(|&i| &self.records[i]).collect()).unwrap_or_default())
    }

    fn parent_of(&self, rec: &Record, expected: Level) -> Result<&Record, StoreError> {
        let pid = rec.parent_id().expect("non-task record");
        let p = self.get(pid).ok_or(StoreError::Integrity { child: rec.id, parent: pid })?;
        if p.level() != expected {
            return Err(StoreError::Schema { id: rec.id, parent: pid, expected, found: p.level() });
        }
        Ok(p)
    }

    pub fn lineage(&self, inhand_id: u64) -> Result<Lineage, StoreError> {
        let inhand = self.get(inhand_id).ok_or(StoreError::NotFound(inhand_id))?;
        if inhand.level() != Level::InHand {
            return Err(StoreError::NotFound(inhand_id));
        }
        let grasp = self.parent_of(inhand, Level::Grasp)?;
        let pose_est = self.parent_of(grasp, Level::PoseEst)?;
        let cloud = self.parent_of(pose_est, Level::Cloud)?;
        let task = self.parent_of(cloud, Level::Task)?;
        Ok(Lineage {
            inhand: inhand.clone(),
            grasp: grasp.clone(),
            pose_est: pose_est.clone(),
            cloud: cloud.clone(),
            task: task.clone(),
        })
    }

    /// Chain from any record up to its task, nearest first.
    pub fn ancestors(&self, id: u64) -> Result<Vec<&Record>, StoreError> {
        let mut rec = self.get(id).ok_or(StoreError::NotFound(id))?;
        let mut out = vec![rec];
        while let Some(expected) = rec.level().parent() {
            rec = self.parent_of(rec, expected)?;
            out.push(rec);
        }
        Ok(out)
    }

    /// First dangling or mistyped parent reference, if any.
    pub fn check_integrity(&self) -> Result<(), StoreError> {
        for rec in &self.records {
            if let Some(expected) = rec.level().parent() {
                let p = self.parent_of(rec, expected)?;
                if p.id >= rec.id {
                    return Err(StoreError::Integrity { child: rec.id, parent: p.id });
                }
            }
        }
        Ok(())
    }

    /// The log text: header plus one line per record.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.records.len() * 160 + 8);
        s.push_str(MAGIC);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }

    pub fn save_as(&self, path: &Path) -> Result<(), StoreError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
