//! Skeleton data model: 16-joint MPII keypoint frames, labelled pose sequences,
//! the kinematic topology, keypoint file I/O, per-frame normalization and the
//! `C×T×I` gait tensor.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_JOINTS: usize = 16;
/// Coordinate channels (x, y).
pub const NUM_COORDS: usize = 2;

/// Revision of the line-oriented keypoint format read by [`parse_sequences`].
pub const KEYPOINT_FORMAT_VERSION: u32 = 1;

/// MPII joint indices.
pub mod joint {
    pub const R_ANKLE: usize = 0;
    pub const R_KNEE: usize = 1;
    pub const R_HIP: usize = 2;
    pub const L_HIP: usize = 3;
    pub const L_KNEE: usize = 4;
    pub const L_ANKLE: usize = 5;
    pub const PELVIS: usize = 6;
    pub const THORAX: usize = 7;
    pub const UPPER_NECK: usize = 8;
    pub const HEAD_TOP: usize = 9;
    pub const R_WRIST: usize = 10;
    pub const R_ELBOW: usize = 11;
    pub const R_SHOULDER: usize = 12;
    pub const L_SHOULDER: usize = 13;
    pub const L_ELBOW: usize = 14;
    pub const L_WRIST: usize = 15;

    pub const NAMES: [&str; super::NUM_JOINTS] = [
        "r_ankle",
        "r_knee",
        "r_hip",
        "l_hip",
        "l_knee",
        "l_ankle",
        "pelvis",
        "thorax",
        "upper_neck",
        "head_top",
        "r_wrist",
        "r_elbow",
        "r_shoulder",
        "l_shoulder",
        "l_elbow",
        "l_wrist",
    ];
}

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("cannot read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: expected {NUM_JOINTS} joints, found {found}")]
    JointCount { line: usize, found: usize },
    #[error("line {line}: duplicate frame {frame_index} in {subject_id}/{sequence_id}")]
    DuplicateFrame {
        line: usize,
        subject_id: String,
        sequence_id: String,
        frame_index: usize,
    },
    #[error("{subject_id}/{sequence_id}: frames must be consecutive, gap after frame {after}")]
    FrameGap {
        subject_id: String,
        sequence_id: String,
        after: usize,
    },
    #[error("{subject_id}/{sequence_id}: {detail}")]
    InvalidSequence {
        subject_id: String,
        sequence_id: String,
        detail: String,
    },
    #[error("{sequence_id}: thorax coincides with pelvis at frame {frame_index}")]
    DegenerateFrame {
        sequence_id: String,
        frame_index: usize,
    },
    #[error(
        "window [{start}, {start}+{window}) invalid for a {len}-frame sequence (window must be at least {min})"
    )]
    WindowOutOfRange {
        start: usize,
        window: usize,
        len: usize,
        min: usize,
    },
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
}

pub type Result<T, E = SkeletonError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Joint {
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self { x, y, confidence }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && (0.0..=1.0).contains(&self.confidence)
    }

    pub fn distance(&self, other: &Joint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointFrame {
    pub frame_index: usize,
    pub joints: [Joint; NUM_JOINTS],
}

impl KeypointFrame {
    pub fn new(frame_index: usize, joints: [Joint; NUM_JOINTS]) -> Self {
        Self {
            frame_index,
            joints,
        }
    }

    /// Applies `f` to every joint position; confidences are kept.
    pub fn map_positions(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let mut joints = self.joints;
        for j in &mut joints {
            (j.x, j.y) = f(j.x, j.y);
        }
        Self {
            frame_index: self.frame_index,
            joints,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "NM")]
    Normal,
    #[serde(rename = "BG")]
    Bag,
    #[serde(rename = "CL")]
    Coat,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Normal, Condition::Bag, Condition::Coat];

    pub fn code(self) -> &'static str {
        match self {
            Condition::Normal => "NM",
            Condition::Bag => "BG",
            Condition::Coat => "CL",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "NM" => Ok(Condition::Normal),
            "BG" => Ok(Condition::Bag),
            "CL" => Ok(Condition::Coat),
            other => Err(format!("unknown condition `{other}`")),
        }
    }
}

/// One walk of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub subject_id: String,
    pub sequence_id: String,
    pub condition: Condition,
    pub view_deg: u16,
    pub frames: Vec<KeypointFrame>,
}

impl PoseSequence {
    /// Validates the invariants: ≥ 2 frames, consecutive frame indices, view in
    /// `[0, 180]`, finite joints with confidence in `[0, 1]`.
    pub fn new(
        subject_id: impl Into<String>,
        sequence_id: impl Into<String>,
        condition: Condition,
        view_deg: u16,
        frames: Vec<KeypointFrame>,
    ) -> Result<Self> {
        let seq = Self {
            subject_id: subject_id.into(),
            sequence_id: sequence_id.into(),
            condition,
            view_deg,
            frames,
        };
        seq.validate()?;
        Ok(seq)
    }

    fn invalid(&self, detail: impl Into<String>) -> SkeletonError {
        SkeletonError::InvalidSequence {
            subject_id: self.subject_id.clone(),
            sequence_id: self.sequence_id.clone(),
            detail: detail.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(self.invalid(format!(
                "needs at least 2 frames, has {}",
                self.frames.len()
            )));
        }
        if self.view_deg > 180 {
            return Err(self.invalid(format!("view {} outside [0, 180]", self.view_deg)));
        }
        for pair in self.frames.windows(2) {
            if pair[1].frame_index != pair[0].frame_index + 1 {
                return Err(SkeletonError::FrameGap {
                    subject_id: self.subject_id.clone(),
                    sequence_id: self.sequence_id.clone(),
                    after: pair[0].frame_index,
                });
            }
        }
        for frame in &self.frames {
            if let Some(i) = frame.joints.iter().position(|j| !j.is_valid()) {
                return Err(self.invalid(format!(
                    "frame {} joint {i} is not finite or has confidence outside [0, 1]",
                    frame.frame_index
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Applies `f` to every joint position of every frame.
    pub fn map_positions(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        Self {
            frames: self.frames.iter().map(|fr| fr.map_positions(&f)).collect(),
            ..self.clone()
        }
    }
}

/// Kinematic tree over the 16 MPII joints.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkeletonTopology {
    parent: [usize; NUM_JOINTS],
    root: usize,
    thorax: usize,
    pelvis: usize,
    lower_limbs: Vec<usize>,
    mirror: [usize; NUM_JOINTS],
}

impl SkeletonTopology {
    /// Standard tree rooted at the pelvis: ankles→knees→hips→pelvis,
    /// wrists→elbows→shoulders→thorax, head-top→upper-neck→thorax→pelvis.
    pub fn mpii() -> Self {
        use joint::*;
        let mut parent = [0; NUM_JOINTS];
        parent[R_ANKLE] = R_KNEE;
        parent[R_KNEE] = R_HIP;
        parent[R_HIP] = PELVIS;
        parent[L_HIP] = PELVIS;
        parent[L_KNEE] = L_HIP;
        parent[L_ANKLE] = L_KNEE;
        parent[PELVIS] = PELVIS;
        parent[THORAX] = PELVIS;
        parent[UPPER_NECK] = THORAX;
        parent[HEAD_TOP] = UPPER_NECK;
        parent[R_WRIST] = R_ELBOW;
        parent[R_ELBOW] = R_SHOULDER;
        parent[R_SHOULDER] = THORAX;
        parent[L_SHOULDER] = THORAX;
        parent[L_ELBOW] = L_SHOULDER;
        parent[L_WRIST] = L_ELBOW;
        let mut mirror: [usize; NUM_JOINTS] = std::array::from_fn(|i| i);
        for (r, l) in [
            (R_ANKLE, L_ANKLE),
            (R_KNEE, L_KNEE),
            (R_HIP, L_HIP),
            (R_WRIST, L_WRIST),
            (R_ELBOW, L_ELBOW),
            (R_SHOULDER, L_SHOULDER),
        ] {
            mirror[r] = l;
            mirror[l] = r;
        }
        Self::new(
            parent,
            (THORAX, PELVIS),
            vec![R_HIP, L_HIP, R_KNEE, L_KNEE, R_ANKLE, L_ANKLE],
            mirror,
        )
        .expect("MPII topology is well formed")
    }

    /// Checks that exactly one joint is its own parent, every parent chain
    /// reaches it, and the centre pair is distinct and in range.
    pub fn new(
        parent: [usize; NUM_JOINTS],
        center_pair: (usize, usize),
        lower_limbs: Vec<usize>,
        mirror: [usize; NUM_JOINTS],
    ) -> Result<Self> {
        let roots: Vec<usize> = (0..NUM_JOINTS).filter(|&i| parent[i] == i).collect();
        let [root] = roots[..] else {
            return Err(SkeletonError::InvalidTopology(format!(
                "expected exactly one root, found {roots:?}"
            )));
        };
        for start in 0..NUM_JOINTS {
            let mut j = start;
            let mut steps = 0;
            while j != root {
                if parent[j] >= NUM_JOINTS || steps > NUM_JOINTS {
                    return Err(SkeletonError::InvalidTopology(format!(
                        "joint {start} does not reach the root"
                    )));
                }
                j = parent[j];
                steps += 1;
            }
        }
        let (thorax, pelvis) = center_pair;
        if thorax == pelvis || thorax >= NUM_JOINTS || pelvis >= NUM_JOINTS {
            return Err(SkeletonError::InvalidTopology(format!(
                "centre pair {center_pair:?} must be two distinct joints"
            )));
        }
        if lower_limbs.iter().any(|&j| j >= NUM_JOINTS) {
            return Err(SkeletonError::InvalidTopology(
                "lower-limb joint out of range".into(),
            ));
        }
        if (0..NUM_JOINTS).any(|i| mirror[i] >= NUM_JOINTS || mirror[mirror[i]] != i) {
            return Err(SkeletonError::InvalidTopology(
                "mirror map must be an involution".into(),
            ));
        }
        Ok(Self {
            parent,
            root,
            thorax,
            pelvis,
            lower_limbs,
            mirror,
        })
    }

    /// Adjacent joint `adj(i)`; the root maps to itself.
    pub fn parent(&self, joint: usize) -> usize {
        self.parent[joint]
    }

    pub fn num_joints(&self) -> usize {
        NUM_JOINTS
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn thorax(&self) -> usize {
        self.thorax
    }

    pub fn pelvis(&self) -> usize {
        self.pelvis
    }

    pub fn lower_limbs(&self) -> &[usize] {
        &self.lower_limbs
    }

    /// Left/right counterpart of `joint` (itself on the midline).
    pub fn mirror(&self, joint: usize) -> usize {
        self.mirror[joint]
    }

    /// Non-root joints, i.e. those that end a bone.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..NUM_JOINTS)
            .filter(|&i| i != self.root)
            .map(|i| (i, self.parent[i]))
    }
}

impl Default for SkeletonTopology {
    fn default() -> Self {
        Self::mpii()
    }
}

/// `C×T×I` array of joint coordinates (channels × frames × joints).
#[derive(Clone, Debug, PartialEq)]
pub struct GaitTensor<T> {
    data: Tensor<T>,
}

impl<T: Scalar> GaitTensor<T> {
    pub fn new(data: Tensor<T>) -> Result<Self, crate::tensor::TensorError> {
        if data.rank() != 3 || !data.is_finite() {
            return Err(crate::tensor::TensorError::InvalidArgument(format!(
                "gait tensor must be a finite rank-3 array, got shape {:?}",
                data.shape()
            )));
        }
        Ok(Self { data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn joints(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn at(&self, c: usize, t: usize, i: usize) -> T {
        self.data.at(&[c, t, i])
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }
}

/// Translates each frame so the thorax–pelvis midpoint sits at the origin and
/// scales it so the thorax–pelvis distance is 1.
pub fn normalize_sequence(seq: &PoseSequence, topo: &SkeletonTopology) -> Result<PoseSequence> {
    let mut frames = Vec::with_capacity(seq.frames.len());
    for frame in &seq.frames {
        let thorax = frame.joints[topo.thorax()];
        let pelvis = frame.joints[topo.pelvis()];
        let scale = thorax.distance(&pelvis);
        if scale == 0.0 || !scale.is_finite() {
            return Err(SkeletonError::DegenerateFrame {
                sequence_id: seq.sequence_id.clone(),
                frame_index: frame.frame_index,
            });
        }
        let cx = (thorax.x + pelvis.x) / 2.0;
        let cy = (thorax.y + pelvis.y) / 2.0;
        frames.push(frame.map_positions(|x, y| ((x - cx) / scale, (y - cy) / scale)));
    }
    Ok(PoseSequence {
        frames,
        ..seq.clone()
    })
}

/// Smallest window accepted by [`to_gait_tensor`] (the velocity branch needs 8 frames).
pub const MIN_WINDOW: usize = 8;

/// `data[c][t][i]` = coordinate `c` of joint `i` at frame `start + t`.
pub fn to_gait_tensor<T: Scalar>(
    seq: &PoseSequence,
    start: usize,
    window: usize,
) -> Result<GaitTensor<T>> {
    if window < MIN_WINDOW || start + window > seq.len() {
        return Err(SkeletonError::WindowOutOfRange {
            start,
            window,
            len: seq.len(),
            min: MIN_WINDOW,
        });
    }
    let mut data = vec![T::zero(); NUM_COORDS * window * NUM_JOINTS];
    for (t, frame) in seq.frames[start..start + window].iter().enumerate() {
        for (i, j) in frame.joints.iter().enumerate() {
            data[t * NUM_JOINTS + i] = T::of(j.x);
            data[(window + t) * NUM_JOINTS + i] = T::of(j.y);
        }
    }
    let tensor =
        Tensor::new(&[NUM_COORDS, window, NUM_JOINTS], data).expect("shape matches allocation");
    GaitTensor::new(tensor).map_err(|e| SkeletonError::InvalidSequence {
        subject_id: seq.subject_id.clone(),
        sequence_id: seq.sequence_id.clone(),
        detail: e.to_string(),
    })
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    subject_id: String,
    sequence_id: String,
    condition: Condition,
    view_deg: i64,
    frame_idx: i64,
    joints: Vec<[f64; 3]>,
}

/// Reads the line-oriented keypoint format from a file.
pub fn load_sequences(path: impl AsRef<Path>) -> Result<Vec<PoseSequence>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| SkeletonError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_sequences(BufReader::new(file)).map_err(|e| match e {
        SkeletonError::Io { source, .. } => SkeletonError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Loads every `*.jsonl` file in `dir` (sorted by file name).
pub fn load_directory(dir: impl AsRef<Path>) -> Result<Vec<PoseSequence>> {
    let dir = dir.as_ref();
    let io_err = |source| SkeletonError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
        .collect();
    files.sort();
    let mut all = Vec::new();
    for f in files {
        all.extend(load_sequences(&f)?);
    }
    all.sort_by(|a, b| (&a.subject_id, &a.sequence_id).cmp(&(&b.subject_id, &b.sequence_id)));
    Ok(all)
}

/// Parses keypoint lines; sequences come back sorted by `(subject_id, sequence_id)`.
pub fn parse_sequences(reader: impl BufRead) -> Result<Vec<PoseSequence>> {
    struct Pending {
        condition: Condition,
        view_deg: u16,
        frames: Vec<(usize, KeypointFrame)>,
    }
    let mut groups: BTreeMap<(String, String), Pending> = BTreeMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|source| SkeletonError::Io {
            path: PathBuf::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| SkeletonError::Parse {
            line: line_no,
            reason,
        };
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.joints.len() != NUM_JOINTS {
            return Err(SkeletonError::JointCount {
                line: line_no,
                found: rec.joints.len(),
            });
        }
        let view_deg = u16::try_from(rec.view_deg)
            .ok()
            .filter(|v| *v <= 180)
            .ok_or_else(|| parse_err(format!("view_deg {} outside [0, 180]", rec.view_deg)))?;
        let frame_index = usize::try_from(rec.frame_idx)
            .map_err(|_| parse_err(format!("negative frame_idx {}", rec.frame_idx)))?;
        let joints: [Joint; NUM_JOINTS] = std::array::from_fn(|i| {
            Joint::new(rec.joints[i][0], rec.joints[i][1], rec.joints[i][2])
        });
        if let Some(i) = joints.iter().position(|j| !j.is_valid()) {
            return Err(parse_err(format!(
                "joint {i} must have finite coordinates and confidence in [0, 1]"
            )));
        }
        let key = (rec.subject_id, rec.sequence_id);
        let entry = groups.entry(key.clone()).or_insert_with(|| Pending {
            condition: rec.condition,
            view_deg,
            frames: Vec::new(),
        });
        if entry.condition != rec.condition || entry.view_deg != view_deg {
            return Err(parse_err(format!(
                "condition/view differ from earlier frames of {}/{}",
                key.0, key.1
            )));
        }
        if entry
            .frames
            .iter()
            .any(|(_, f)| f.frame_index == frame_index)
        {
            return Err(SkeletonError::DuplicateFrame {
                line: line_no,
                subject_id: key.0,
                sequence_id: key.1,
                frame_index,
            });
        }
        entry
            .frames
            .push((line_no, KeypointFrame::new(frame_index, joints)));
    }

    groups
        .into_iter()
        .map(|((subject_id, sequence_id), mut pending)| {
            pending.frames.sort_by_key(|(_, f)| f.frame_index);
            let frames = pending.frames.into_iter().map(|(_, f)| f).collect();
            PoseSequence::new(
                subject_id,
                sequence_id,
                pending.condition,
                pending.view_deg,
                frames,
            )
        })
        .collect()
}

/// Writes sequences in the keypoint format, one JSON object per frame, LF endings.
pub fn write_sequences<'a>(
    mut writer: impl Write,
    sequences: impl IntoIterator<Item = &'a PoseSequence>,
) -> std::io::Result<()> {
    for seq in sequences {
        for frame in &seq.frames {
            let rec = FrameRecord {
                subject_id: seq.subject_id.clone(),
                sequence_id: seq.sequence_id.clone(),
                condition: seq.condition,
                view_deg: i64::from(seq.view_deg),
                frame_idx: frame.frame_index as i64,
                joints: frame
                    .joints
                    .iter()
                    .map(|j| [j.x, j.y, j.confidence])
                    .collect(),
            };
            serde_json::to_writer(&mut writer, &rec)?;
            writer.write_all(b"\n")?;
        }
    }
    Ok(())
}
