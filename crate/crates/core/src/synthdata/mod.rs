//! Deterministic synthetic clips of small moving objects on a grayscale
//! grid, the TSN-style segment sampler, and the dataset manifest format.
//!
//! All geometry is integer arithmetic on a 1/16-pixel grid and pixel
//! intensities are integer levels in `0..=256`, so a clip is bitwise
//! reproducible from `(scenario, length, seed)` on any platform.

mod dataset;
mod raw;
mod sampler;

pub use dataset::{
    build_split, class_names, interaction_classes, read_manifest, trajectory_classes, write_manifest, DatasetConfig,
    ManifestEntry, Split,
};
pub use raw::{read_raw, write_raw, RAW_MAGIC, RAW_VERSION};
pub use sampler::{segment_bounds, segment_sample, SampleMode};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sub-pixel units per pixel.
pub const SUB: i64 = 16;
/// Intensity levels per unit of pixel value.
pub const LEVELS: i64 = 256;

/// Quarter-wave sine in Q12, 64 steps per quarter turn.
const QUARTER_SINE: [i64; 65] = [
    0, 101, 201, 301, 401, 501, 601, 700, 799, 897, 995, 1092, 1189, 1285, 1380, 1474, 1567, 1660, 1751, 1842,
    1931, 2019, 2106, 2191, 2276, 2359, 2440, 2520, 2598, 2675, 2751, 2824, 2896, 2967, 3035, 3102, 3166, 3229,
    3290, 3349, 3406, 3461, 3513, 3564, 3612, 3659, 3703, 3745, 3784, 3822, 3857, 3889, 3920, 3948, 3973, 3996,
    4017, 4036, 4052, 4065, 4076, 4085, 4091, 4095, 4096,
];
const Q: i64 = 4096;

/// `sin` of `angle/256` turns, in Q12.
fn sin_q(angle: i64) -> i64 {
    let a = angle.rem_euclid(256);
    match a / 64 {
        0 => QUARTER_SINE[a as usize],
        1 => QUARTER_SINE[(128 - a) as usize],
        2 => -QUARTER_SINE[(a - 128) as usize],
        _ => -QUARTER_SINE[(256 - a) as usize],
    }
}

fn cos_q(angle: i64) -> i64 {
    sin_q(angle + 64)
}

/// Integer division rounding half away from zero; symmetric under negation.
fn round_div(n: i64, d: i64) -> i64 {
    debug_assert!(d > 0);
    if n >= 0 {
        (n + d / 2) / d
    } else {
        -((-n + d / 2) / d)
    }
}

/// `a + (b - a)·t/span`, rounded. Swapping `(a, b)` and replacing `t` with
/// `span - t` gives the identical value, which makes reversed motions exact.
fn lerp(a: i64, b: i64, t: i64, span: i64) -> i64 {
    round_div(a * (span - t) + b * t, span)
}

pub type Point = [i64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Marker {
    Square { side: i64 },
    Disc { radius: i64 },
    Ring { outer: i64, inner: i64 },
    Cross { arm: i64 },
    Bar { length: i64, thickness: i64, vertical: bool },
}

impl Marker {
    /// Half-extent in pixels, used for keeping objects inside the frame.
    pub fn reach(&self) -> i64 {
        match *self {
            Marker::Square { side } => side / 2 + 1,
            Marker::Disc { radius } => radius + 1,
            Marker::Ring { outer, .. } => outer + 1,
            Marker::Cross { arm } => arm + 1,
            Marker::Bar { length, thickness, .. } => length.max(thickness) / 2 + 1,
        }
    }

    /// Whether pixel offset `(dx, dy)` from the centre pixel is covered.
    fn covers(&self, dx: i64, dy: i64) -> bool {
        match *self {
            Marker::Square { side } => {
                let lo = -(side / 2);
                (lo..lo + side).contains(&dx) && (lo..lo + side).contains(&dy)
            }
            Marker::Disc { radius } => dx * dx + dy * dy <= radius * radius,
            Marker::Ring { outer, inner } => {
                let d = dx * dx + dy * dy;
                d <= outer * outer && d > inner * inner
            }
            Marker::Cross { arm } => (dx.abs() <= 1 && dy.abs() <= arm) || (dy.abs() <= 1 && dx.abs() <= arm),
            Marker::Bar {
                length,
                thickness,
                vertical,
            } => {
                let (along, across) = if vertical { (dy, dx) } else { (dx, dy) };
                let lo_l = -(length / 2);
                let lo_t = -(thickness / 2);
                (lo_l..lo_l + length).contains(&along) && (lo_t..lo_t + thickness).contains(&across)
            }
        }
    }
}

/// Position of an object as a function of frame index, in sub-pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Motion {
    Static {
        at: Point,
    },
    /// Straight line from `from` (first frame) to `to` (last frame).
    Linear {
        from: Point,
        to: Point,
    },
    /// Piecewise-linear path through `points`, legs of equal duration.
    Waypoints {
        points: Vec<Point>,
    },
    /// Circular motion; the angle advances by `sweep/256` turns over the clip.
    Circle {
        center: Point,
        radius: i64,
        start: i64,
        sweep: i64,
    },
    /// Triangle-wave oscillation along one axis.
    Oscillate {
        center: Point,
        vertical: bool,
        amplitude: i64,
        period: i64,
        phase: i64,
    },
}

impl Motion {
    pub fn position(&self, t: usize, length: usize) -> Point {
        let t = t as i64;
        let span = (length as i64 - 1).max(1);
        match self {
            Motion::Static { at } => *at,
            Motion::Linear { from, to } => [lerp(from[0], to[0], t, span), lerp(from[1], to[1], t, span)],
            Motion::Waypoints { points } => {
                let legs = points.len() as i64 - 1;
                if legs <= 0 {
                    return points[0];
                }
                let s = t * legs;
                let leg = (s / span).min(legs - 1);
                let local = s - leg * span;
                let (a, b) = (points[leg as usize], points[leg as usize + 1]);
                [lerp(a[0], b[0], local, span), lerp(a[1], b[1], local, span)]
            }
            Motion::Circle {
                center,
                radius,
                start,
                sweep,
            } => {
                let angle = start + round_div(sweep * t, span);
                [
                    center[0] + round_div(radius * cos_q(angle), Q),
                    center[1] + round_div(radius * sin_q(angle), Q),
                ]
            }
            Motion::Oscillate {
                center,
                vertical,
                amplitude,
                period,
                phase,
            } => {
                let p = (t + phase).rem_euclid(*period);
                let half = period / 2;
                // triangle wave in [-amplitude, amplitude]
                let tri = if p <= half {
                    lerp(-amplitude, *amplitude, p, half.max(1))
                } else {
                    lerp(*amplitude, -amplitude, p - half, (period - half).max(1))
                };
                if *vertical {
                    [center[0], center[1] + tri]
                } else {
                    [center[0] + tri, center[1]]
                }
            }
        }
    }

    fn reversed(&self) -> Motion {
        match self {
            Motion::Linear { from, to } => Motion::Linear { from: *to, to: *from },
            Motion::Waypoints { points } => Motion::Waypoints {
                points: points.iter().rev().copied().collect(),
            },
            Motion::Circle {
                center,
                radius,
                start,
                sweep,
            } => Motion::Circle {
                center: *center,
                radius: *radius,
                start: start + sweep,
                sweep: -sweep,
            },
            other => other.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub marker: Marker,
    /// Intensity in `0..=256`.
    pub level: i64,
    pub motion: Motion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathShape {
    Line,
    OutAndBack,
    Loop,
    Corner,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Approach,
    Recede,
    Orbit,
}

/// Generator family of a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioKind {
    /// A single static marker.
    Appearance { marker: Marker },
    /// A square jittering along one axis.
    ShortMotion { vertical: bool },
    /// A square travelling along a long path.
    Trajectory { path: PathShape },
    /// Two squares moving relative to each other.
    Interaction { relation: Relation },
}

impl ScenarioKind {
    pub fn name(&self) -> String {
        match self {
            ScenarioKind::Appearance { marker } => match marker {
                Marker::Square { .. } => "static_square".into(),
                Marker::Disc { .. } => "static_disc".into(),
                Marker::Ring { .. } => "static_ring".into(),
                Marker::Cross { .. } => "static_cross".into(),
                Marker::Bar { vertical, .. } => {
                    if *vertical {
                        "static_vbar".into()
                    } else {
                        "static_hbar".into()
                    }
                }
            },
            ScenarioKind::ShortMotion { vertical } => {
                if *vertical {
                    "jitter_vertical".into()
                } else {
                    "jitter_horizontal".into()
                }
            }
            ScenarioKind::Trajectory { path } => format!("{path:?}").to_lowercase(),
            ScenarioKind::Interaction { relation } => format!("{relation:?}").to_lowercase(),
        }
    }
}

/// Fully specified clip content: class, generator family, object tracks and
/// noise amplitude (in intensity levels).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub class: usize,
    pub kind: ScenarioKind,
    pub frame_size: usize,
    pub objects: Vec<ObjectTrack>,
    pub noise: i64,
}

const MOVER: Marker = Marker::Square { side: 4 };
const MOVER_LEVEL: i64 = 224;

fn unit(dir: i64) -> [i64; 2] {
    [cos_q(dir), sin_q(dir)]
}

/// `c + u·dist` with `u` in Q12 and `dist` in sub-pixels.
fn offset(c: Point, u: [i64; 2], dist: i64) -> Point {
    [c[0] + round_div(u[0] * dist, Q), c[1] + round_div(u[1] * dist, Q)]
}

impl Scenario {
    /// Draws object parameters for `kind` from `rng`.
    pub fn sample<R: Rng + ?Sized>(
        class: usize,
        kind: ScenarioKind,
        frame_size: usize,
        noise: i64,
        rng: &mut R,
    ) -> Result<Scenario> {
        let size = frame_size as i64;
        // pick a centre (in sub-pixels) keeping `margin` pixels from every edge
        let centre = |rng: &mut R, margin: i64| -> Result<Point> {
            if 2 * margin >= size {
                return Err(Error::Config(format!("frame size {frame_size} too small for {kind:?}")));
            }
            let mut coord = || rng.gen_range(margin * SUB..=(size - margin) * SUB);
            Ok([coord(), coord()])
        };
        let objects = match kind {
            ScenarioKind::Appearance { marker } => {
                let at = centre(rng, marker.reach())?;
                vec![ObjectTrack {
                    marker,
                    level: rng.gen_range(176..=240),
                    motion: Motion::Static { at },
                }]
            }
            ScenarioKind::ShortMotion { vertical } => {
                let amplitude = 2 * SUB;
                let c = centre(rng, MOVER.reach() + 3)?;
                vec![ObjectTrack {
                    marker: MOVER,
                    level: MOVER_LEVEL,
                    motion: Motion::Oscillate {
                        center: c,
                        vertical,
                        amplitude,
                        period: 4,
                        phase: rng.gen_range(0..4),
                    },
                }]
            }
            ScenarioKind::Trajectory { path } => {
                let dir = rng.gen_range(0..16) * 16;
                let u = unit(dir);
                let motion = match path {
                    PathShape::Line | PathShape::OutAndBack => {
                        let len = rng.gen_range(16..=20) * SUB;
                        let c = centre(rng, len / SUB / 2 + MOVER.reach() + 1)?;
                        let a = offset(c, u, -len / 2);
                        let b = offset(c, u, len / 2);
                        if path == PathShape::Line {
                            Motion::Linear { from: a, to: b }
                        } else {
                            Motion::Waypoints { points: vec![a, b, a] }
                        }
                    }
                    PathShape::Loop => {
                        let radius = 7 * SUB;
                        let c = centre(rng, 7 + MOVER.reach() + 1)?;
                        let turn = if rng.gen_bool(0.5) { 256 } else { -256 };
                        Motion::Circle {
                            center: c,
                            radius,
                            start: rng.gen_range(0..256),
                            sweep: turn,
                        }
                    }
                    PathShape::Corner => {
                        let leg = 9 * SUB;
                        let c = centre(rng, 9 + MOVER.reach() + 1)?;
                        let turn = if rng.gen_bool(0.5) { 64 } else { -64 };
                        let v = unit(dir + turn);
                        // corner sits at the centre; both legs radiate from it
                        let a = offset(c, u, -leg);
                        let b = offset(c, v, leg);
                        Motion::Waypoints { points: vec![a, c, b] }
                    }
                };
                vec![ObjectTrack {
                    marker: MOVER,
                    level: MOVER_LEVEL,
                    motion,
                }]
            }
            ScenarioKind::Interaction { relation } => {
                let dir = rng.gen_range(0..16) * 16;
                let u = unit(dir);
                match relation {
                    Relation::Approach | Relation::Recede => {
                        let far = rng.gen_range(18..=22) * SUB;
                        let near = 5 * SUB;
                        let c = centre(rng, far / SUB / 2 + MOVER.reach() + 1)?;
                        let track = |from: Point, to: Point| ObjectTrack {
                            marker: MOVER,
                            level: MOVER_LEVEL,
                            motion: Motion::Linear { from, to },
                        };
                        let a = track(offset(c, u, -far / 2), offset(c, u, -near / 2));
                        let b = track(offset(c, u, far / 2), offset(c, u, near / 2));
                        let mut objs = vec![a, b];
                        if relation == Relation::Recede {
                            for o in &mut objs {
                                o.motion = o.motion.reversed();
                            }
                        }
                        objs
                    }
                    Relation::Orbit => {
                        let radius = rng.gen_range(5..=7) * SUB;
                        let c = centre(rng, radius / SUB + MOVER.reach() + 1)?;
                        let start = rng.gen_range(0..256);
                        let sweep = if rng.gen_bool(0.5) { 128 } else { -128 };
                        (0..2)
                            .map(|k| ObjectTrack {
                                marker: MOVER,
                                level: MOVER_LEVEL,
                                motion: Motion::Circle {
                                    center: c,
                                    radius,
                                    start: start + 128 * k,
                                    sweep,
                                },
                            })
                            .collect()
                    }
                }
            }
        };
        Ok(Scenario {
            class,
            kind,
            frame_size,
            objects,
            noise,
        })
    }

    /// The same scene played backwards: every motion reversed.
    pub fn time_reversed(&self) -> Scenario {
        let mut s = self.clone();
        for o in &mut s.objects {
            o.motion = o.motion.reversed();
        }
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// Raw frames, values in `[0, 1]`.
    #[default]
    Appearance,
    /// Consecutive frame differences, values in `[-1, 1]`.
    Motion,
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "appearance" | "spatial" => Ok(Modality::Appearance),
            "motion" | "temporal" => Ok(Modality::Motion),
            other => Err(Error::Config(format!("unknown stream `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    /// `frame_size × frame_size` grids.
    pub frames: Vec<Tensor>,
    pub label: usize,
    pub modality: Modality,
}

impl SynthVideo {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Noise generator for frame `t`: one ChaCha stream per frame so frames can
/// be rendered independently.
fn frame_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64 + 1);
    rng
}

/// Intensity levels of frame `t`, row-major.
pub fn render_levels(scenario: &Scenario, length: usize, seed: u64, t: usize) -> Vec<i64> {
    let s = scenario.frame_size as i64;
    let mut img = vec![0i64; (s * s) as usize];
    for obj in &scenario.objects {
        let [cx, cy] = obj.motion.position(t, length);
        let (px, py) = (round_div(cx, SUB), round_div(cy, SUB));
        let r = obj.marker.reach();
        for y in (py - r).max(0)..(py + r + 1).min(s) {
            for x in (px - r).max(0)..(px + r + 1).min(s) {
                if obj.marker.covers(x - px, y - py) {
                    let p = &mut img[(y * s + x) as usize];
                    *p = (*p).max(obj.level);
                }
            }
        }
    }
    if scenario.noise > 0 {
        let mut rng = frame_rng(seed, t);
        for p in &mut img {
            let k = rng.gen_range(-scenario.noise..=scenario.noise);
            *p = (*p + k).clamp(0, LEVELS);
        }
    }
    img
}

fn levels_to_tensor(levels: &[i64], size: usize) -> Tensor {
    Tensor::from_fn(&[size, size], |i| levels[i] as f64 / LEVELS as f64)
}

/// Renders appearance frame `t`.
pub fn render_frame(scenario: &Scenario, length: usize, seed: u64, t: usize) -> Tensor {
    levels_to_tensor(&render_levels(scenario, length, seed, t), scenario.frame_size)
}

/// Renders the snippet at `t` in the requested modality. Motion snippet `t`
/// is frame `t+1` minus frame `t`.
pub fn render_snippet(scenario: &Scenario, length: usize, seed: u64, modality: Modality, t: usize) -> Tensor {
    match modality {
        Modality::Appearance => render_frame(scenario, length, seed, t),
        Modality::Motion => {
            let a = render_levels(scenario, length, seed, t);
            let b = render_levels(scenario, length, seed, t + 1);
            let size = scenario.frame_size;
            Tensor::from_fn(&[size, size], |i| {
                ((b[i] - a[i]) as f64 / LEVELS as f64).clamp(-1.0, 1.0)
            })
        }
    }
}

/// Materialises all `length` appearance frames of a clip.
pub fn generate(scenario: &Scenario, length: usize, seed: u64) -> Result<SynthVideo> {
    if length < 2 {
        return Err(Error::Data(format!("clip length {length} < 2")));
    }
    Ok(SynthVideo {
        frames: (0..length).map(|t| render_frame(scenario, length, seed, t)).collect(),
        label: scenario.class,
        modality: Modality::Appearance,
    })
}

/// Consecutive differences `frame[t+1] - frame[t]`, clipped to `[-1, 1]`.
pub fn frame_difference(video: &SynthVideo) -> Result<SynthVideo> {
    if video.len() < 2 {
        return Err(Error::Data(format!("frame difference needs 2 frames, got {}", video.len())));
    }
    if video.modality != Modality::Appearance {
        return Err(Error::Data("frame difference of a motion clip".into()));
    }
    let frames = video
        .frames
        .windows(2)
        .map(|w| {
            let (a, b) = (&w[0], &w[1]);
            Tensor::from_fn(a.shape(), |i| (b.data()[i] - a.data()[i]).clamp(-1.0, 1.0))
        })
        .collect();
    Ok(SynthVideo {
        frames,
        label: video.label,
        modality: Modality::Motion,
    })
}

/// Number of snippets a clip of `length` frames offers in `modality`.
pub fn snippet_count(length: usize, modality: Modality) -> usize {
    match modality {
        Modality::Appearance => length,
        Modality::Motion => length.saturating_sub(1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(kind: ScenarioKind, noise: i64, seed: u64) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Scenario::sample(0, kind, 32, noise, &mut rng).unwrap()
    }

    #[test]
    fn sine_table_quadrants() {
        assert_eq!(sin_q(0), 0);
        assert_eq!(sin_q(64), Q);
        assert_eq!(sin_q(128), 0);
        assert_eq!(sin_q(192), -Q);
        assert_eq!(cos_q(0), Q);
        assert_eq!(sin_q(-64), -Q);
        for a in 0..256 {
            assert_eq!(sin_q(a), -sin_q(-a));
        }
    }

    #[test]
    fn round_div_is_symmetric() {
        for n in -50..50 {
            assert_eq!(round_div(n, 7), -round_div(-n, 7));
        }
        assert_eq!(round_div(5, 2), 3);
        assert_eq!(round_div(-5, 2), -3);
    }

    #[test]
    fn static_scene_without_noise_is_constant() {
        let s = sample(
            ScenarioKind::Appearance {
                marker: Marker::Disc { radius: 4 },
            },
            0,
            1,
        );
        let v = generate(&s, 12, 7).unwrap();
        assert!(v.frames.windows(2).all(|w| w[0] == w[1]));
        assert!(v.frames[0].max_abs() > 0.5);
        let d = frame_difference(&v).unwrap();
        assert_eq!(d.len(), 11);
        assert!(d.frames.iter().all(|f| f.max_abs() == 0.0));
    }

    #[test]
    fn recede_is_reversed_approach() {
        let approach = sample(
            ScenarioKind::Interaction {
                relation: Relation::Approach,
            },
            0,
            3,
        );
        let recede = sample(
            ScenarioKind::Interaction {
                relation: Relation::Recede,
            },
            0,
            3,
        );
        // identical draws, mirrored motion
        assert_eq!(recede.objects, approach.time_reversed().objects);
        for length in [16, 17, 32] {
            let a = generate(&approach, length, 11).unwrap();
            let r = generate(&recede, length, 11).unwrap();
            for t in 0..length {
                assert_eq!(a.frames[t], r.frames[length - 1 - t], "length {length} frame {t}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let s = sample(
            ScenarioKind::Trajectory {
                path: PathShape::Loop,
            },
            24,
            5,
        );
        let a = generate(&s, 20, 99).unwrap();
        let b = generate(&s, 20, 99).unwrap();
        assert_eq!(a, b);
        let c = generate(&s, 20, 100).unwrap();
        assert_ne!(a, c);
        for f in &a.frames {
            assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
            // values sit on the 1/256 grid
            assert!(f.data().iter().all(|v| (v * 256.0).fract() == 0.0));
        }
        assert!(generate(&s, 1, 0).is_err());
    }

    #[test]
    fn one_pixel_mover_leaves_dipole() {
        let s = Scenario {
            class: 0,
            kind: ScenarioKind::Trajectory { path: PathShape::Line },
            frame_size: 8,
            objects: vec![ObjectTrack {
                marker: Marker::Square { side: 1 },
                level: 256,
                motion: Motion::Linear {
                    from: [SUB, 3 * SUB],
                    to: [4 * SUB, 3 * SUB],
                },
            }],
            noise: 0,
        };
        let v = generate(&s, 4, 0).unwrap();
        let d = frame_difference(&v).unwrap();
        for (t, f) in d.frames.iter().enumerate() {
            let row = 3 * 8;
            assert_eq!(f.data()[row + 1 + t], -1.0);
            assert_eq!(f.data()[row + 2 + t], 1.0);
            assert_eq!(f.data().iter().filter(|v| **v != 0.0).count(), 2);
            assert_eq!(render_snippet(&s, 4, 0, Modality::Motion, t), *f);
        }
    }

    #[test]
    fn cumulative_differences_reconstruct_frames() {
        let s = sample(
            ScenarioKind::Interaction {
                relation: Relation::Orbit,
            },
            16,
            8,
        );
        let v = generate(&s, 10, 3).unwrap();
        let d = frame_difference(&v).unwrap();
        let mut acc = v.frames[0].clone();
        for t in 0..d.len() {
            acc.add_assign(&d.frames[t]).unwrap();
            assert_eq!(acc, v.frames[t + 1]);
        }
    }

    #[test]
    fn objects_stay_inside_frame() {
        let kinds = interaction_classes().into_iter().chain(trajectory_classes());
        for (k, kind) in kinds.enumerate() {
            for seed in 0..20 {
                let s = sample(kind, 0, seed * 31 + k as u64);
                let length = 24;
                for t in 0..length {
                    for o in &s.objects {
                        let [x, y] = o.motion.position(t, length);
                        let r = o.marker.reach() * SUB;
                        assert!(x - r >= 0 && x + r <= 32 * SUB, "{kind:?} x={x}");
                        assert!(y - r >= 0 && y + r <= 32 * SUB, "{kind:?} y={y}");
                    }
                }
            }
        }
    }
}
