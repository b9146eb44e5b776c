//! Parametric 2D walker used for desk-scale data.
//!
//! Each subject is a kinematic tree with its own limb proportions, cadence and
//! swing amplitudes. Joint angles are sinusoids of the gait phase, so a
//! rendered sequence is exactly periodic (up to forward translation and the
//! injected keypoint noise).

use std::f64::consts::{PI, TAU};
use std::io::Write;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{Condition, Joint, KeypointFrame, NUM_JOINTS, PoseSequence, joint};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{frames} frames is shorter than the {period}-frame period")]
    TooShort { frames: usize, period: usize },
    #[error("invalid synthetic configuration: {0}")]
    InvalidConfig(String),
}

/// Bone lengths. `torso` is in image units; the rest are multiples of it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimbLengths {
    pub torso: f64,
    pub neck: f64,
    pub head: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub thigh: f64,
    pub shin: f64,
    /// Thorax-to-shoulder half width.
    pub shoulder_width: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkerParams {
    pub limb_lengths: LimbLengths,
    pub period_frames: usize,
    /// Radians in `[0, 2π)`.
    pub phase: f64,
    /// Peak hip swing, radians.
    pub stride_amplitude: f64,
    /// Peak shoulder swing, radians.
    pub arm_amplitude: f64,
    /// Vertical pelvis oscillation, torso units.
    pub bounce_amplitude: f64,
    /// Forward speed, torso units per frame.
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub subjects: usize,
    pub nm_sequences: usize,
    pub bg_sequences: usize,
    pub cl_sequences: usize,
    pub frames: usize,
    pub views: Vec<u16>,
    /// Keypoint jitter standard deviation, torso units.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 12,
            nm_sequences: 6,
            bg_sequences: 2,
            cl_sequences: 2,
            frames: 60,
            views: vec![36, 90, 144],
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let counts = [
            self.subjects,
            self.nm_sequences,
            self.bg_sequences,
            self.cl_sequences,
            self.frames,
        ];
        if counts.contains(&0) || self.views.is_empty() {
            return Err(SynthError::InvalidConfig(
                "all counts must be positive".into(),
            ));
        }
        if let Some(v) = self.views.iter().find(|&&v| v > 180) {
            return Err(SynthError::InvalidConfig(format!(
                "view {v} outside [0, 180]"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SynthError::InvalidConfig(
                "noise_sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn sequences_for(&self, condition: Condition) -> usize {
        match condition {
            Condition::Normal => self.nm_sequences,
            Condition::Bag => self.bg_sequences,
            Condition::Coat => self.cl_sequences,
        }
    }
}

/// Sampling ranges, `(low, high)`.
pub mod ranges {
    pub const TORSO: (f64, f64) = (0.9, 1.1);
    pub const NECK: (f64, f64) = (0.12, 0.20);
    pub const HEAD: (f64, f64) = (0.18, 0.28);
    pub const UPPER_ARM: (f64, f64) = (0.28, 0.38);
    pub const FOREARM: (f64, f64) = (0.24, 0.34);
    pub const THIGH: (f64, f64) = (0.40, 0.55);
    pub const SHIN: (f64, f64) = (0.38, 0.52);
    pub const SHOULDER_WIDTH: (f64, f64) = (0.15, 0.25);
    pub const PERIOD: (usize, usize) = (16, 32);
    pub const STRIDE: (f64, f64) = (0.35, 0.55);
    pub const ARM: (f64, f64) = (0.20, 0.45);
    pub const BOUNCE: (f64, f64) = (0.01, 0.04);
    pub const SPEED: (f64, f64) = (0.02, 0.05);
}

/// Smallest view-dependent amplitude factor (frontal and rear views).
pub const VIEW_FLOOR: f64 = 0.15;
/// Second-harmonic weight of the hip swing. Real hip trajectories are not
/// time-symmetric, and a pure sine would make the two legs' mirrored poses
/// recur every quarter cycle.
pub const HIP_HARMONIC: f64 = 0.3;
/// Limb inflation for the coat condition.
pub const COAT_INFLATION: f64 = 1.10;

const TAG_SUBJECT: u64 = 0x5355_424A;
const TAG_SEQUENCE: u64 = 0x5345_5155;

/// SplitMix64 fold over `parts`; used to derive independent sub-seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        state = state.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..hi)
}

pub fn sample_subject(seed: u64, subject_index: usize) -> WalkerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, TAG_SUBJECT, subject_index as u64]));
    let limb_lengths = LimbLengths {
        torso: draw(&mut rng, ranges::TORSO),
        neck: draw(&mut rng, ranges::NECK),
        head: draw(&mut rng, ranges::HEAD),
        upper_arm: draw(&mut rng, ranges::UPPER_ARM),
        forearm: draw(&mut rng, ranges::FOREARM),
        thigh: draw(&mut rng, ranges::THIGH),
        shin: draw(&mut rng, ranges::SHIN),
        shoulder_width: draw(&mut rng, ranges::SHOULDER_WIDTH),
    };
    WalkerParams {
        limb_lengths,
        period_frames: rng.random_range(ranges::PERIOD.0..=ranges::PERIOD.1),
        phase: rng.random_range(0.0..TAU),
        stride_amplitude: draw(&mut rng, ranges::STRIDE),
        arm_amplitude: draw(&mut rng, ranges::ARM),
        bounce_amplitude: draw(&mut rng, ranges::BOUNCE),
        speed: draw(&mut rng, ranges::SPEED),
    }
}

/// Swing amplitude factor for a camera at `view_deg` (90 = side view).
pub fn view_factor(view_deg: u16) -> f64 {
    (f64::from(view_deg).to_radians().sin().abs()).max(VIEW_FLOOR)
}

/// Per-sequence rendering knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub view_deg: u16,
    pub condition: Condition,
    pub noise_sigma: f64,
    /// Added to the subject's phase, radians.
    pub phase_offset: f64,
    pub noise_seed: u64,
}

const SHOULDER_REGION: [usize; 5] = [
    joint::UPPER_NECK,
    joint::R_SHOULDER,
    joint::L_SHOULDER,
    joint::R_ELBOW,
    joint::L_ELBOW,
];

fn limb_end(origin: (f64, f64), length: f64, angle: f64) -> (f64, f64) {
    // angle measured from straight down, positive towards the walking direction
    (
        origin.0 + length * angle.sin(),
        origin.1 - length * angle.cos(),
    )
}

/// Noise-free joint positions at frame `t`.
pub fn pose_at(
    params: &WalkerParams,
    t: usize,
    view_deg: u16,
    condition: Condition,
    phase_offset: f64,
) -> [(f64, f64); NUM_JOINTS] {
    let s = view_factor(view_deg);
    let lateral = f64::from(view_deg).to_radians().cos();
    let inflate = if condition == Condition::Coat {
        COAT_INFLATION
    } else {
        1.0
    };
    let l = &params.limb_lengths;
    let unit = l.torso * inflate;
    let p = params.period_frames;
    let phi = TAU * (t % p) as f64 / p as f64 + params.phase + phase_offset;

    let stride = params.stride_amplitude * s;
    let arm = params.arm_amplitude * s;
    let knee_flex = 2.0 * stride;

    let pelvis = (
        params.speed * l.torso * t as f64 * s,
        (l.thigh + l.shin) * unit + params.bounce_amplitude * l.torso * (2.0 * phi).cos(),
    );
    let thorax = (pelvis.0, pelvis.1 + unit);
    let upper_neck = (thorax.0, thorax.1 + l.neck * unit);
    let head_top = (upper_neck.0, upper_neck.1 + l.head * unit);

    let mut out = [(0.0, 0.0); NUM_JOINTS];
    out[joint::PELVIS] = pelvis;
    out[joint::THORAX] = thorax;
    out[joint::UPPER_NECK] = upper_neck;
    out[joint::HEAD_TOP] = head_top;

    let legs = [
        (joint::R_HIP, joint::R_KNEE, joint::R_ANKLE, phi),
        (joint::L_HIP, joint::L_KNEE, joint::L_ANKLE, phi + PI),
    ];
    for (hip_j, knee_j, ankle_j, leg_phase) in legs {
        let hip = pelvis;
        let swing = stride * (leg_phase.sin() + HIP_HARMONIC * (2.0 * leg_phase).sin());
        let flex = knee_flex * (1.0 - leg_phase.cos()) / 2.0;
        let knee = limb_end(hip, l.thigh * unit, swing);
        let ankle = limb_end(knee, l.shin * unit, swing - flex);
        out[hip_j] = hip;
        out[knee_j] = knee;
        out[ankle_j] = ankle;
    }

    let arms = [
        (
            joint::R_SHOULDER,
            joint::R_ELBOW,
            joint::R_WRIST,
            1.0,
            phi + PI,
            false,
        ),
        (
            joint::L_SHOULDER,
            joint::L_ELBOW,
            joint::L_WRIST,
            -1.0,
            phi,
            condition == Condition::Bag,
        ),
    ];
    for (sh_j, el_j, wr_j, side, arm_phase, carrying) in arms {
        let shoulder = (
            thorax.0 + side * l.shoulder_width * unit * lateral,
            thorax.1,
        );
        let (swing, bend) = if carrying {
            (0.05, 0.3)
        } else {
            (
                arm * arm_phase.sin(),
                0.15 + 0.25 * arm * (1.0 + arm_phase.sin()),
            )
        };
        let elbow = limb_end(shoulder, l.upper_arm * unit, swing);
        let wrist = limb_end(elbow, l.forearm * unit, swing + bend);
        out[sh_j] = shoulder;
        out[el_j] = elbow;
        out[wr_j] = wrist;
    }
    out
}

/// Renders `frames` frames. Coordinates are y-up image units.
pub fn render_sequence(
    params: &WalkerParams,
    frames: usize,
    options: &RenderOptions,
    subject_id: &str,
    sequence_id: &str,
) -> Result<PoseSequence, SynthError> {
    if frames < params.period_frames {
        return Err(SynthError::TooShort {
            frames,
            period: params.period_frames,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.noise_seed);
    let sigma = options.noise_sigma * params.limb_lengths.torso;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let (confidence, base_mult) = match options.condition {
        Condition::Normal => (0.95, 1.0),
        Condition::Bag => (0.9, 1.0),
        Condition::Coat => (0.8, 3.0),
    };
    let out = (0..frames)
        .map(|t| {
            let pose = pose_at(
                params,
                t,
                options.view_deg,
                options.condition,
                options.phase_offset,
            );
            let joints = std::array::from_fn(|j| {
                let mult = if options.condition == Condition::Bag && SHOULDER_REGION.contains(&j) {
                    2.0
                } else {
                    base_mult
                };
                let (x, y) = pose[j];
                let (nx, ny) = if sigma > 0.0 {
                    (noise.sample(&mut rng), noise.sample(&mut rng))
                } else {
                    (0.0, 0.0)
                };
                Joint::new(x + sigma * mult * nx, y + sigma * mult * ny, confidence)
            });
            KeypointFrame::new(t, joints)
        })
        .collect();
    Ok(PoseSequence::new(
        subject_id,
        sequence_id,
        options.condition,
        options.view_deg,
        out,
    )
    .expect("rendered sequences satisfy the sequence invariants"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub sequence_id: String,
    pub condition: Condition,
    pub view_deg: u16,
    pub params: WalkerParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub sequences: Vec<PoseSequence>,
    pub manifest: Vec<ManifestEntry>,
}

pub fn subject_id(index: usize) -> String {
    format!("s{:03}", index + 1)
}

pub fn sequence_id(condition: Condition, index: usize, view_deg: u16) -> String {
    format!(
        "{}-{:02}-{:03}",
        condition.code().to_lowercase(),
        index + 1,
        view_deg
    )
}

/// Full grid subjects × conditions × sequences × views, ordered that way.
pub fn generate_dataset(config: &SynthConfig) -> Result<SynthDataset, SynthError> {
    config.validate()?;
    let mut sequences = Vec::new();
    let mut manifest = Vec::new();
    for subject in 0..config.subjects {
        let params = sample_subject(config.seed, subject);
        let sid = subject_id(subject);
        for condition in Condition::ALL {
            for index in 0..config.sequences_for(condition) {
                for &view in &config.views {
                    let sub_seed = mix_seed(&[
                        config.seed,
                        TAG_SEQUENCE,
                        subject as u64,
                        condition as u64,
                        u64::from(view),
                        index as u64,
                    ]);
                    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
                    let options = RenderOptions {
                        view_deg: view,
                        condition,
                        noise_sigma: config.noise_sigma,
                        phase_offset: rng.random_range(0.0..TAU),
                        noise_seed: rng.random(),
                    };
                    let qid = sequence_id(condition, index, view);
                    sequences.push(render_sequence(
                        &params,
                        config.frames,
                        &options,
                        &sid,
                        &qid,
                    )?);
                    manifest.push(ManifestEntry {
                        subject_id: sid.clone(),
                        sequence_id: qid,
                        condition,
                        view_deg: view,
                        params,
                    });
                }
            }
        }
    }
    Ok(SynthDataset {
        sequences,
        manifest,
    })
}

pub const MANIFEST_HEADER: &str = "subject_id\tsequence_id\tcondition\tview_deg\tperiod_frames\tphase\tstride_amplitude\tarm_amplitude\tbounce_amplitude\tspeed\ttorso\tneck\thead\tupper_arm\tforearm\tthigh\tshin\tshoulder_width";

/// Tab-separated manifest, one line per sequence, with a header row.
pub fn write_manifest(mut w: impl Write, entries: &[ManifestEntry]) -> std::io::Result<()> {
    writeln!(w, "{MANIFEST_HEADER}")?;
    for e in entries {
        let p = &e.params;
        let l = &p.limb_lengths;
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.subject_id,
            e.sequence_id,
            e.condition,
            e.view_deg,
            p.period_frames,
            p.phase,
            p.stride_amplitude,
            p.arm_amplitude,
            p.bounce_amplitude,
            p.speed,
            l.torso,
            l.neck,
            l.head,
            l.upper_arm,
            l.forearm,
            l.thigh,
            l.shin,
            l.shoulder_width
        )?;
    }
    Ok(())
}
