//! Synthetic videos of colored shapes performing simple motions, with exact
//! per-instance masks and optical flow.

use std::fmt;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, input_err, Result};
use crate::metrics::LabelMap;
use crate::tensor::{Mask, Volume};
use crate::videoenc::{StreamKind, VideoClip};

/// Background intensity of every RGB channel.
pub const BACKGROUND: u8 = 40;
/// Flow is quantized to this many steps per pixel.
pub const FLOW_STEPS: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    MovingLeft,
    MovingRight,
    MovingUp,
    MovingDown,
    Growing,
    Shrinking,
    StandingStill,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 30, 30],
            Color::Green => [30, 200, 30],
            Color::Blue => [30, 30, 230],
        }
    }
}

impl Action {
    pub const ALL: [Action; 7] = [
        Action::MovingLeft,
        Action::MovingRight,
        Action::MovingUp,
        Action::MovingDown,
        Action::Growing,
        Action::Shrinking,
        Action::StandingStill,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Action::MovingLeft => "moving left",
            Action::MovingRight => "moving right",
            Action::MovingUp => "moving up",
            Action::MovingDown => "moving down",
            Action::Growing => "growing",
            Action::Shrinking => "shrinking",
            Action::StandingStill => "standing still",
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        })
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        })
    }
}

/// Actor-action label pair, used for pair-mode queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pair(pub usize);

impl Pair {
    pub const COUNT: usize = Shape::ALL.len() * Action::ALL.len();

    pub fn new(shape: Shape, action: Action) -> Self {
        let s = Shape::ALL
            .iter()
            .position(|&x| x == shape)
            .expect("known shape");
        let a = Action::ALL
            .iter()
            .position(|&x| x == action)
            .expect("known action");
        Pair(s * Action::ALL.len() + a)
    }

    pub fn shape(self) -> Shape {
        Shape::ALL[self.0 / Action::ALL.len()]
    }

    pub fn action(self) -> Action {
        Action::ALL[self.0 % Action::ALL.len()]
    }

    /// Query text, e.g. "square moving left".
    pub fn text(self) -> String {
        format!("{} {}", self.shape(), self.action().phrase())
    }

    pub fn all() -> impl Iterator<Item = Pair> {
        (0..Self::COUNT).map(Pair)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// 1..=max_actors actors with distinct colors; sentences "<color> <shape> <action>".
    Standard,
    /// Two identical squares, one moving left and one moving right.
    MotionOnly,
    /// Actors with distinct shapes; sentences are actor-action pair texts.
    Pairs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeWorldSpec {
    pub canvas: usize,
    pub frames: usize,
    pub max_actors: usize,
    /// Translation speed in pixels per frame.
    pub speed: f64,
    /// Change of half-size per frame for growing/shrinking actors.
    pub growth: f64,
    /// Half-size range at the center frame.
    pub min_half: f64,
    pub max_half: f64,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for ShapeWorldSpec {
    fn default() -> Self {
        Self {
            canvas: 64,
            frames: 8,
            max_actors: 3,
            speed: 2.0,
            growth: 0.5,
            min_half: 5.0,
            max_half: 8.0,
            seed: 7,
            variant: Variant::Standard,
        }
    }
}

const MARGIN: f64 = 2.0;

impl ShapeWorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.canvas == 0 {
            return Err(config_err!("canvas and frame count must be positive"));
        }
        if !(1..=3).contains(&self.max_actors) {
            return Err(config_err!(
                "max_actors must be in 1..=3, got {}",
                self.max_actors
            ));
        }
        if self.variant == Variant::MotionOnly && self.max_actors < 2 {
            return Err(config_err!("the motion-only variant needs two actors"));
        }
        if !(self.min_half >= 1.0 && self.max_half >= self.min_half) {
            return Err(config_err!(
                "half-size range [{}, {}] is invalid",
                self.min_half,
                self.max_half
            ));
        }
        if self.growth < 0.0 || self.speed < 0.0 {
            return Err(config_err!("speed and growth must be nonnegative"));
        }
        if self.growth * std::f64::consts::SQRT_2 > self.speed {
            return Err(config_err!(
                "growth {} would outpace the speed bound {}",
                self.growth,
                self.speed
            ));
        }
        if self.min_half - self.growth * ((self.frames / 2) as f64) < 1.0 {
            return Err(config_err!(
                "shrinking actors would vanish within {} frames",
                self.frames
            ));
        }
        let span = (self.frames / 2) as f64;
        let extent = 2.0 * (self.max_half + self.growth * span + 1.0)
            + self.speed * (self.frames as f64 - 1.0);
        let free = self.canvas as f64 - 2.0 * MARGIN;
        if extent > free {
            return Err(config_err!(
                "an actor sweeps {extent:.1} px but the canvas leaves {free:.1} px"
            ));
        }
        let actors = if self.variant == Variant::MotionOnly {
            2
        } else {
            self.max_actors
        };
        let side = 2.0 * (self.max_half + self.growth * span + 1.0);
        let footprint = actors as f64 * side * (side + self.speed * (self.frames as f64 - 1.0));
        if footprint > 0.75 * free * free {
            return Err(config_err!(
                "{actors} actors do not fit on a {0}x{0} canvas",
                self.canvas
            ));
        }
        Ok(())
    }

    pub fn center_frame(&self) -> usize {
        self.frames / 2
    }
}

/// One actor's trajectory, parameterized around the center frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub shape: Shape,
    pub color: Color,
    pub action: Action,
    /// Center `(x, y)` at the center frame.
    pub center: (f64, f64),
    pub half: f64,
    pub velocity: (f64, f64),
    pub growth: f64,
}

impl Actor {
    fn state(&self, dt: f64) -> ((f64, f64), f64) {
        (
            (
                self.center.0 + self.velocity.0 * dt,
                self.center.1 + self.velocity.1 * dt,
            ),
            self.half + self.growth * dt,
        )
    }

    /// Whether the pixel center `(j + .5, i + .5)` is covered `dt` frames after the center frame.
    pub fn covers(&self, i: usize, j: usize, dt: f64) -> bool {
        let ((cx, cy), h) = self.state(dt);
        let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
        match self.shape {
            Shape::Square => (x - cx).abs() <= h && (y - cy).abs() <= h,
            Shape::Circle => (x - cx).powi(2) + (y - cy).powi(2) <= h * h,
            Shape::Triangle => y <= cy + h && (x - cx).abs() <= (y - cy + h) / 2.0,
        }
    }

    fn bbox(&self, dt: f64) -> [f64; 4] {
        let ((cx, cy), h) = self.state(dt);
        [cx - h, cy - h, cx + h, cy + h]
    }

    /// Displacement of the point `(x, y)` from frame `dt` to `dt + 1`.
    fn displacement(&self, x: f64, y: f64, dt: f64) -> (f64, f64) {
        let ((cx, cy), h) = self.state(dt);
        let scale = (self.half + self.growth * (dt + 1.0)) / h - 1.0;
        (
            self.velocity.0 + (x - cx) * scale,
            self.velocity.1 + (y - cy) * scale,
        )
    }

    pub fn sentence(&self, variant: Variant) -> String {
        match variant {
            Variant::Pairs => self.pair().text(),
            _ => format!("{} {} {}", self.color, self.shape, self.action.phrase()),
        }
    }

    pub fn pair(&self) -> Pair {
        Pair::new(self.shape, self.action)
    }
}

/// A rendered video with its actors.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub variant: Variant,
    pub appearance: VideoClip,
    pub flow: VideoClip,
    pub actors: Vec<Actor>,
    /// Center-frame mask per actor.
    pub masks: Vec<Mask>,
    pub center: usize,
}

impl Video {
    /// Per-pixel actor-action class at the center frame.
    pub fn pair_labels(&self) -> LabelMap {
        let r = self.appearance.size();
        let mut out = LabelMap::background(r, r);
        for (a, m) in self.actors.iter().zip(&self.masks) {
            for (k, &on) in m.data.iter().enumerate() {
                if on {
                    out.data[k] = Some(a.pair().0);
                }
            }
        }
        out
    }

    pub fn instance_id(k: usize) -> String {
        format!("{k}")
    }
}

/// One (video, referred instance) training or test example.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSample {
    pub video: Arc<Video>,
    pub instance: usize,
    pub sentence: String,
    pub gt_mask: Mask,
    pub video_id: String,
    pub instance_id: String,
}

impl AnnotatedSample {
    pub fn clip(&self, kind: StreamKind) -> &VideoClip {
        match kind {
            StreamKind::Appearance => &self.video.appearance,
            StreamKind::Flow => &self.video.flow,
        }
    }

    pub fn center(&self) -> usize {
        self.video.center
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Per-video seed derived from the master seed, split and index.
pub fn video_seed(master: u64, split: Split, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(split.to_string().as_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn quantize_flow(v: f64) -> f32 {
    ((v * FLOW_STEPS).round() / FLOW_STEPS) as f32
}

fn sample_actor<R: Rng>(
    spec: &ShapeWorldSpec,
    rng: &mut R,
    shape: Shape,
    color: Color,
    action: Action,
) -> Actor {
    let lo = MARGIN + spec.max_half + spec.growth * (spec.frames / 2) as f64 + 1.0;
    let hi = spec.canvas as f64 - lo;
    let center = (
        rng.random_range(lo..=hi).round(),
        rng.random_range(lo..=hi).round(),
    );
    let half = rng.random_range(spec.min_half..=spec.max_half);
    let v = spec.speed;
    let (velocity, growth) = match action {
        Action::MovingLeft => ((-v, 0.0), 0.0),
        Action::MovingRight => ((v, 0.0), 0.0),
        Action::MovingUp => ((0.0, -v), 0.0),
        Action::MovingDown => ((0.0, v), 0.0),
        Action::Growing => ((0.0, 0.0), spec.growth),
        Action::Shrinking => ((0.0, 0.0), -spec.growth),
        Action::StandingStill => ((0.0, 0.0), 0.0),
    };
    Actor {
        shape,
        color,
        action,
        center,
        half,
        velocity,
        growth,
    }
}

fn fits(spec: &ShapeWorldSpec, actors: &[Actor]) -> bool {
    let c = spec.center_frame() as f64;
    let size = spec.canvas as f64;
    (0..spec.frames).all(|t| {
        let dt = t as f64 - c;
        let boxes: Vec<[f64; 4]> = actors.iter().map(|a| a.bbox(dt)).collect();
        let inside = boxes.iter().all(|b| {
            b[0] >= MARGIN && b[1] >= MARGIN && b[2] <= size - MARGIN && b[3] <= size - MARGIN
        });
        let apart = (0..boxes.len()).all(|p| {
            (p + 1..boxes.len()).all(|q| {
                let (a, b) = (boxes[p], boxes[q]);
                a[2] + 1.0 < b[0] || b[2] + 1.0 < a[0] || a[3] + 1.0 < b[1] || b[3] + 1.0 < a[1]
            })
        });
        inside && apart
    })
}

fn cast_actors<R: Rng>(spec: &ShapeWorldSpec, rng: &mut R) -> Vec<(Shape, Color, Action)> {
    match spec.variant {
        Variant::Standard => {
            let k = rng.random_range(1..=spec.max_actors);
            let mut colors = Color::ALL.to_vec();
            colors.shuffle(rng);
            colors
                .into_iter()
                .take(k)
                .map(|c| {
                    (
                        *Shape::ALL.choose(rng).expect("shape"),
                        c,
                        *Action::ALL.choose(rng).expect("action"),
                    )
                })
                .collect()
        }
        Variant::MotionOnly => {
            let color = *Color::ALL.choose(rng).expect("color");
            let mut cast = vec![
                (Shape::Square, color, Action::MovingLeft),
                (Shape::Square, color, Action::MovingRight),
            ];
            cast.shuffle(rng);
            cast
        }
        Variant::Pairs => {
            let k = rng.random_range(1..=spec.max_actors);
            let mut shapes = Shape::ALL.to_vec();
            shapes.shuffle(rng);
            shapes
                .into_iter()
                .take(k)
                .map(|s| {
                    (
                        s,
                        *Color::ALL.choose(rng).expect("color"),
                        *Action::ALL.choose(rng).expect("action"),
                    )
                })
                .collect()
        }
    }
}

/// Renders one video from its own seed.
pub fn render_video(spec: &ShapeWorldSpec, id: String, seed: u64) -> Result<Video> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cast = cast_actors(spec, &mut rng);
    let mut actors = None;
    for _ in 0..2000 {
        let mut candidate: Vec<Actor> = cast
            .iter()
            .map(|&(s, c, a)| sample_actor(spec, &mut rng, s, c, a))
            .collect();
        if spec.variant == Variant::MotionOnly {
            candidate[1].half = candidate[0].half;
        }
        if fits(spec, &candidate) {
            actors = Some(candidate);
            break;
        }
    }
    let actors = actors
        .ok_or_else(|| config_err!("could not place {} actors without overlap", cast.len()))?;

    let r = spec.canvas;
    let center = spec.center_frame();
    let mut rgb = Volume::<f32>::zeros(spec.frames, r, r, 3);
    let mut flow = Volume::<f32>::zeros(spec.frames, r, r, 2);
    let bg = BACKGROUND as f32 / 255.0;
    rgb.data.iter_mut().for_each(|v| *v = bg);
    for t in 0..spec.frames {
        let dt = t as f64 - center as f64;
        for a in &actors {
            let col = a.color.rgb().map(|c| c as f32 / 255.0);
            for i in 0..r {
                for j in 0..r {
                    if !a.covers(i, j, dt) {
                        continue;
                    }
                    rgb.at_mut(t, i, j).copy_from_slice(&col);
                    let (dx, dy) = a.displacement(j as f64 + 0.5, i as f64 + 0.5, dt);
                    flow.at_mut(t, i, j)
                        .copy_from_slice(&[quantize_flow(dx), quantize_flow(dy)]);
                }
            }
        }
    }
    let masks = actors
        .iter()
        .map(|a| Mask::from_fn(r, r, |i, j| a.covers(i, j, 0.0)))
        .collect();
    Ok(Video {
        id,
        variant: spec.variant,
        appearance: VideoClip::new(StreamKind::Appearance, rgb)?,
        flow: VideoClip::new(StreamKind::Flow, flow)?,
        actors,
        masks,
        center,
    })
}

pub fn video_id(split: Split, index: usize) -> String {
    format!("{split}_{index:05}")
}

/// Video `index` of a split, as [`generate_videos`] would render it.
pub fn nth_video(spec: &ShapeWorldSpec, split: Split, index: usize) -> Result<Video> {
    render_video(
        spec,
        video_id(split, index),
        video_seed(spec.seed, split, index),
    )
}

/// `count` videos of one split.
pub fn generate_videos(spec: &ShapeWorldSpec, split: Split, count: usize) -> Result<Vec<Video>> {
    if count == 0 {
        return Err(input_err!("count must be at least 1"));
    }
    spec.validate()?;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..count)
            .into_par_iter()
            .map(|k| nth_video(spec, split, k))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(|k| nth_video(spec, split, k)).collect()
    }
}

/// One sample per actor instance.
pub fn samples_of(video: Arc<Video>) -> Vec<AnnotatedSample> {
    (0..video.actors.len())
        .map(|k| AnnotatedSample {
            instance: k,
            sentence: video.actors[k].sentence(video.variant),
            gt_mask: video.masks[k].clone(),
            video_id: video.id.clone(),
            instance_id: Video::instance_id(k),
            video: Arc::clone(&video),
        })
        .collect()
}

/// Exactly `count` samples of one split, in video order.
pub fn generate(spec: &ShapeWorldSpec, split: Split, count: usize) -> Result<Vec<AnnotatedSample>> {
    if count == 0 {
        return Err(input_err!("count must be at least 1"));
    }
    spec.validate()?;
    let mut out = Vec::with_capacity(count);
    let mut k = 0;
    while out.len() < count {
        let v = render_video(spec, video_id(split, k), video_seed(spec.seed, split, k))?;
        out.extend(samples_of(Arc::new(v)));
        k += 1;
    }
    out.truncate(count);
    Ok(out)
}
