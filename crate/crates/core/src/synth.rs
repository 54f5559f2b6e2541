//! Deterministic "stickperson" data: identities are colour palettes, poses
//! come from parameterized limb-angle families, cameras set the background.
//!
//! Every colour is an 8-bit value so that PNG round trips are exact.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_id, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::pose::{fill_disc, joint, stroke_segment, to_pixel, Joint, KeypointSet, NUM_JOINTS};
use crate::raster::{Image, PersonImage};

pub type Rgb8 = [u8; 3];

/// Minimum distance between two identities' concatenated palettes.
pub const MIN_PALETTE_SEPARATION: f64 = 0.3;
/// Minimum distance from any palette colour to any camera background.
pub const MIN_BACKGROUND_CONTRAST: f64 = 0.35;
/// Pixels farther than this from the estimated background are foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.2;
/// Palette distance of an image without foreground.
pub const NO_FOREGROUND_DISTANCE: f64 = f64::INFINITY;

fn unit(c: Rgb8) -> [f64; 3] {
    c.map(|v| v as f64 / 255.0)
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Image-range colour of an 8-bit triple (matches PNG decoding).
pub fn signed(c: Rgb8) -> [f32; 3] {
    c.map(|v| v as f32 / 127.5 - 1.0)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    pub torso: Rgb8,
    pub legs: Rgb8,
    pub head: Rgb8,
    pub bag: Option<Rgb8>,
}

impl Palette {
    pub fn colors(&self) -> Vec<Rgb8> {
        let mut c = vec![self.torso, self.legs, self.head];
        c.extend(self.bag);
        c
    }

    fn concatenated(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for (k, c) in [self.torso, self.legs, self.head].iter().enumerate() {
            out[3 * k..3 * k + 3].copy_from_slice(&unit(*c));
        }
        out
    }

    /// Euclidean distance between concatenated (torso, legs, head) palettes.
    pub fn distance(&self, other: &Palette) -> f64 {
        let (a, b) = (self.concatenated(), other.concatenated());
        a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StickIdentity {
    pub id: usize,
    pub palette: Palette,
    /// Multiplies limb lengths.
    pub limb_scale: f32,
    /// Multiplies the shoulder and hip widths.
    pub width_scale: f32,
}

/// Limb-angle families. Angles are measured from straight down; positive
/// values swing a limb away from the body's midline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseFamily {
    Stand,
    WalkRight,
    WalkLeft,
    ArmsRaised,
    RightArmRaised,
    LeftArmRaised,
    Wide,
    HandsOnHips,
    Crouch,
    Kick,
    ArmsCrossed,
    SideStep,
}

struct FamilyAngles {
    // (upper, lower) for right arm, left arm, right leg, left leg
    limbs: [(f32, f32); 4],
    hip_drop: f32,
}

impl PoseFamily {
    pub const DOMAIN_A: [PoseFamily; 8] = [
        PoseFamily::Stand,
        PoseFamily::WalkRight,
        PoseFamily::WalkLeft,
        PoseFamily::ArmsRaised,
        PoseFamily::RightArmRaised,
        PoseFamily::Wide,
        PoseFamily::HandsOnHips,
        PoseFamily::Crouch,
    ];

    pub const DOMAIN_B: [PoseFamily; 8] = [
        PoseFamily::Stand,
        PoseFamily::WalkLeft,
        PoseFamily::ArmsRaised,
        PoseFamily::LeftArmRaised,
        PoseFamily::Kick,
        PoseFamily::ArmsCrossed,
        PoseFamily::SideStep,
        PoseFamily::HandsOnHips,
    ];

    fn angles(self) -> FamilyAngles {
        use PoseFamily::*;
        let (limbs, hip_drop) = match self {
            Stand => ([(0.15, 0.1), (0.15, 0.1), (0.05, 0.03), (0.05, 0.03)], 0.0),
            WalkRight => ([(-0.35, -0.5), (0.45, 0.3), (0.4, 0.25), (-0.25, -0.15)], 0.01),
            WalkLeft => ([(0.45, 0.3), (-0.35, -0.5), (-0.25, -0.15), (0.4, 0.25)], 0.01),
            ArmsRaised => ([(2.5, 2.75), (2.5, 2.75), (0.08, 0.05), (0.08, 0.05)], 0.0),
            RightArmRaised => ([(2.5, 2.75), (0.15, 0.1), (0.05, 0.03), (0.05, 0.03)], 0.0),
            LeftArmRaised => ([(0.15, 0.1), (2.5, 2.75), (0.05, 0.03), (0.05, 0.03)], 0.0),
            Wide => ([(0.6, 0.9), (0.6, 0.9), (0.35, 0.35), (0.35, 0.35)], 0.02),
            HandsOnHips => ([(0.75, -0.65), (0.75, -0.65), (0.1, 0.1), (0.1, 0.1)], 0.0),
            Crouch => ([(0.3, 0.7), (0.3, 0.7), (0.9, -0.25), (0.9, -0.25)], 0.09),
            Kick => ([(0.5, 0.5), (0.5, 0.5), (0.75, 0.45), (0.0, 0.0)], 0.02),
            ArmsCrossed => ([(-0.3, -1.3), (-0.3, -1.3), (0.08, 0.05), (0.08, 0.05)], 0.0),
            SideStep => ([(0.2, 0.2), (0.1, 0.0), (0.5, 0.4), (-0.05, 0.0)], 0.015),
        };
        FamilyAngles { limbs, hip_drop }
    }
}

/// Generates a jittered skeleton of the given family.
///
/// Coordinates are built in height units around the image centre and then
/// normalized; `aspect` is height / width.
pub fn family_pose<R: Rng + ?Sized>(
    family: PoseFamily,
    identity: &StickIdentity,
    jitter: f32,
    aspect: f32,
    rng: &mut R,
) -> KeypointSet {
    let a = family.angles();
    let mut j = |v: f32| v + rng.random_range(-jitter..=jitter);
    let limbs = a.limbs.map(|(u, l)| (j(u), j(l)));
    let shift_u = j(0.0) * 0.15;
    let shift_v = j(0.0) * 0.1;
    let ls = identity.limb_scale;
    let ws = identity.width_scale;

    let neck = (0.0, 0.24);
    let nose = (0.0, 0.14);
    let shoulder_w = 0.06 * ws;
    let hip_w = 0.04 * ws;
    let hip_v = 0.52 + a.hip_drop;
    let (upper_arm, forearm) = (0.12 * ls, 0.11 * ls);
    let (thigh, shin) = (0.19 * ls, 0.19 * ls - a.hip_drop * 0.5);

    // side: -1 for the person's right (image left), +1 for the left
    let chain = |side: f32, root: (f32, f32), (up, low): (f32, f32), l1: f32, l2: f32| {
        let mid = (root.0 + side * up.sin() * l1, root.1 + up.cos() * l1);
        let end = (mid.0 + side * low.sin() * l2, mid.1 + low.cos() * l2);
        (mid, end)
    };
    let rs = (-shoulder_w, neck.1 + 0.01);
    let lsh = (shoulder_w, neck.1 + 0.01);
    let rh = (-hip_w, hip_v);
    let lh = (hip_w, hip_v);
    let (re, rw) = chain(-1.0, rs, limbs[0], upper_arm, forearm);
    let (le, lw) = chain(1.0, lsh, limbs[1], upper_arm, forearm);
    let (rk, ra) = chain(-1.0, rh, limbs[2], thigh, shin);
    let (lk, la) = chain(1.0, lh, limbs[3], thigh, shin);
    let body = [
        (joint::NECK, neck),
        (joint::NOSE, nose),
        (joint::R_EYE, (-0.015, 0.125)),
        (joint::L_EYE, (0.015, 0.125)),
        (joint::R_EAR, (-0.03, 0.135)),
        (joint::L_EAR, (0.03, 0.135)),
        (joint::R_SHOULDER, rs),
        (joint::L_SHOULDER, lsh),
        (joint::R_ELBOW, re),
        (joint::R_WRIST, rw),
        (joint::L_ELBOW, le),
        (joint::L_WRIST, lw),
        (joint::R_HIP, rh),
        (joint::L_HIP, lh),
        (joint::R_KNEE, rk),
        (joint::R_ANKLE, ra),
        (joint::L_KNEE, lk),
        (joint::L_ANKLE, la),
    ];
    // fit inside the frame: shrink wide poses about the centre, then limit
    // the shift so that no joint leaves [MARGIN, 1 - MARGIN]
    const MARGIN: f32 = 0.03;
    let half = 0.5 - MARGIN;
    let reach = body.iter().map(|(_, p)| p.0.abs() * aspect).fold(0.0, f32::max);
    let shrink = if reach > half { half / reach } else { 1.0 };
    let (min_u, max_u) = body.iter().fold((f32::MAX, f32::MIN), |(lo, hi), (_, p)| {
        let x = p.0 * shrink * aspect;
        (lo.min(x), hi.max(x))
    });
    let (min_v, max_v) = body
        .iter()
        .fold((f32::MAX, f32::MIN), |(lo, hi), (_, p)| (lo.min(p.1), hi.max(p.1)));
    let dx = (shift_u * aspect).clamp(-half - min_u, half - max_u);
    let dy = shift_v.clamp(MARGIN - min_v, 1.0 - MARGIN - max_v);
    let mut joints = [Joint::HIDDEN; NUM_JOINTS];
    for (idx, p) in body {
        joints[idx] = Joint::at(0.5 + p.0 * shrink * aspect + dx, p.1 + dy);
    }
    KeypointSet::new(&joints).expect("18 joints")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BodyPart {
    Torso,
    Legs,
    Head,
    Bag,
}

pub const LIMB_THICKNESS: u32 = 3;
pub const HEAD_RADIUS: u32 = 3;

fn inside_quad(q: [(f64, f64); 4], p: (f64, f64)) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let (a, b) = (q[i], q[(i + 1) % 4]);
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        if cross.abs() < 1e-12 {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Visits every stickperson pixel with the body part painted there, in
/// paint order (legs, torso, arms, bag strap, head).
pub fn paint_stickperson(
    kp: &KeypointSet,
    dims: (usize, usize),
    with_bag: bool,
    mut f: impl FnMut(BodyPart, usize, usize),
) {
    let vis = |i: usize| kp.joint(i).visible;
    let px = |i: usize| to_pixel(kp.joint(i), dims);
    let seg = |a: usize, b: usize, t: u32, part: BodyPart, f: &mut dyn FnMut(BodyPart, usize, usize)| {
        if vis(a) && vis(b) {
            stroke_segment(px(a), px(b), t, dims, |y, x| f(part, y, x));
        }
    };
    for (a, b) in [
        (joint::R_HIP, joint::R_KNEE),
        (joint::R_KNEE, joint::R_ANKLE),
        (joint::L_HIP, joint::L_KNEE),
        (joint::L_KNEE, joint::L_ANKLE),
    ] {
        seg(a, b, LIMB_THICKNESS, BodyPart::Legs, &mut f);
    }
    let quad = [joint::R_SHOULDER, joint::L_SHOULDER, joint::L_HIP, joint::R_HIP];
    if quad.iter().all(|&i| vis(i)) {
        let corners = quad.map(|i| {
            let (x, y) = px(i);
            (x as f64, y as f64)
        });
        for y in 0..dims.0 {
            for x in 0..dims.1 {
                if inside_quad(corners, (x as f64, y as f64)) {
                    f(BodyPart::Torso, y, x);
                }
            }
        }
        for i in 0..4 {
            seg(quad[i], quad[(i + 1) % 4], LIMB_THICKNESS, BodyPart::Torso, &mut f);
        }
    }
    seg(joint::NECK, joint::R_SHOULDER, LIMB_THICKNESS, BodyPart::Torso, &mut f);
    seg(joint::NECK, joint::L_SHOULDER, LIMB_THICKNESS, BodyPart::Torso, &mut f);
    for (a, b) in [
        (joint::R_SHOULDER, joint::R_ELBOW),
        (joint::R_ELBOW, joint::R_WRIST),
        (joint::L_SHOULDER, joint::L_ELBOW),
        (joint::L_ELBOW, joint::L_WRIST),
    ] {
        seg(a, b, LIMB_THICKNESS, BodyPart::Torso, &mut f);
    }
    if with_bag {
        // strap across the torso, inside the shoulder-hip quad
        seg(joint::R_SHOULDER, joint::L_HIP, 1, BodyPart::Bag, &mut f);
    }
    seg(joint::NECK, joint::NOSE, 2, BodyPart::Head, &mut f);
    if vis(joint::NOSE) {
        fill_disc(px(joint::NOSE), HEAD_RADIUS, dims, |y, x| f(BodyPart::Head, y, x));
    }
}

/// Renders an identity in a pose over a camera background.
pub fn render_stickperson(
    identity: &StickIdentity,
    kp: &KeypointSet,
    background: Rgb8,
    dims: (usize, usize),
) -> PersonImage {
    let mut img = Image::filled(dims.0, dims.1, signed(background));
    let p = &identity.palette;
    paint_stickperson(kp, dims, p.bag.is_some(), |part, y, x| {
        let c = match part {
            BodyPart::Torso => p.torso,
            BodyPart::Legs => p.legs,
            BodyPart::Head => p.head,
            BodyPart::Bag => p.bag.unwrap_or(p.torso),
        };
        img.set_pixel(y, x, signed(c));
    });
    img
}

/// Boolean silhouette of the stickperson drawn from `kp`.
pub fn silhouette_mask(kp: &KeypointSet, dims: (usize, usize)) -> Vec<bool> {
    let mut mask = vec![false; dims.0 * dims.1];
    paint_stickperson(kp, dims, false, |_, y, x| mask[y * dims.1 + x] = true);
    mask
}

// snapped to the 8-bit grid the data is stored on
fn pixel_unit(p: [f32; 3]) -> [f64; 3] {
    p.map(|v| (((v as f64) + 1.0) * 127.5).round().clamp(0.0, 255.0) / 255.0)
}

/// Per-channel median of the border pixels, in `[0, 1]` units.
pub fn estimate_background(img: &Image) -> [f64; 3] {
    let (h, w) = img.dims();
    let mut border = Vec::new();
    for x in 0..w {
        border.push(img.pixel(0, x));
        border.push(img.pixel(h - 1, x));
    }
    for y in 1..h - 1 {
        border.push(img.pixel(y, 0));
        border.push(img.pixel(y, w - 1));
    }
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let mut vals: Vec<f64> = border.iter().map(|&p| pixel_unit(p)[c]).collect();
        vals.sort_by(f64::total_cmp);
        *o = vals[vals.len() / 2];
    }
    out
}

/// Pixels that differ from the estimated background.
pub fn foreground_mask(img: &Image) -> Vec<bool> {
    let bg = estimate_background(img);
    img.pixels()
        .map(|p| dist3(pixel_unit(p), bg) > FOREGROUND_THRESHOLD)
        .collect()
}

/// Distance between an image's foreground colour histogram and an identity's
/// palette: the histogram-weighted mean distance from foreground colours to
/// their nearest palette colour, plus the mean distance from each palette
/// colour to its nearest foreground colour. Zero for a clean render.
pub fn identity_palette_distance(img: &Image, identity: &StickIdentity) -> f64 {
    let mask = foreground_mask(img);
    let mut histogram: HashMap<[u32; 3], (usize, [f64; 3])> = HashMap::new();
    for (p, fg) in img.pixels().zip(mask) {
        if fg {
            let c = pixel_unit(p);
            histogram.entry(p.map(f32::to_bits)).or_insert((0, c)).0 += 1;
        }
    }
    let total: usize = histogram.values().map(|(n, _)| n).sum();
    if total == 0 {
        return NO_FOREGROUND_DISTANCE;
    }
    let palette: Vec<[f64; 3]> = identity.palette.colors().into_iter().map(unit).collect();
    let nearest =
        |c: [f64; 3], set: &mut dyn Iterator<Item = [f64; 3]>| set.map(|q| dist3(c, q)).fold(f64::INFINITY, f64::min);
    let to_palette: f64 = histogram
        .values()
        .map(|&(n, c)| n as f64 * nearest(c, &mut palette.iter().copied()))
        .sum::<f64>()
        / total as f64;
    let coverage: f64 = palette
        .iter()
        .map(|&q| nearest(q, &mut histogram.values().map(|&(_, c)| c)))
        .sum::<f64>()
        / palette.len() as f64;
    to_palette + coverage
}

/// IoU between an image's foreground and the silhouette drawn from `kp`.
pub fn pose_mask_iou(img: &Image, kp: &KeypointSet) -> f64 {
    let fg = foreground_mask(img);
    let sil = silhouette_mask(kp, img.dims());
    mask_iou(&fg, &sil)
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Background colours and pose-bank composition of a data domain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthDomain {
    /// Dark backgrounds, domain-A pose families.
    #[default]
    A,
    /// Light backgrounds, domain-B pose families.
    B,
}

impl SynthDomain {
    pub fn pose_bank(self) -> Vec<PoseFamily> {
        match self {
            SynthDomain::A => PoseFamily::DOMAIN_A.to_vec(),
            SynthDomain::B => PoseFamily::DOMAIN_B.to_vec(),
        }
    }

    /// Cameras within a domain differ only slightly; the domains differ a lot.
    pub fn backgrounds(self) -> Vec<Rgb8> {
        match self {
            SynthDomain::A => vec![[40, 40, 48], [48, 44, 40], [36, 48, 44], [50, 40, 50]],
            SynthDomain::B => vec![[160, 160, 150], [150, 160, 168], [168, 156, 146], [156, 168, 156]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_identities: usize,
    /// The first `n_train_identities` identities form the training split;
    /// the rest are split into query and gallery.
    pub n_train_identities: usize,
    pub images_per_identity: usize,
    pub n_cameras: usize,
    /// `[height, width]`
    pub dims: [usize; 2],
    pub domain: SynthDomain,
    /// Overrides the domain's pose families.
    pub pose_bank: Option<Vec<PoseFamily>>,
    /// Overrides the domain's per-camera backgrounds (cycled if fewer than
    /// `n_cameras`).
    pub backgrounds: Option<Vec<Rgb8>>,
    pub angle_jitter: f32,
    pub bag_probability: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_identities: 20,
            n_train_identities: 10,
            images_per_identity: 8,
            n_cameras: 2,
            dims: [64, 32],
            domain: SynthDomain::A,
            pose_bank: None,
            backgrounds: None,
            angle_jitter: 0.12,
            bag_probability: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn domain_b() -> Self {
        Self {
            domain: SynthDomain::B,
            ..Self::default()
        }
    }

    pub fn pose_bank(&self) -> Vec<PoseFamily> {
        self.pose_bank.clone().unwrap_or_else(|| self.domain.pose_bank())
    }

    pub fn backgrounds(&self) -> Vec<Rgb8> {
        self.backgrounds.clone().unwrap_or_else(|| self.domain.backgrounds())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || self.images_per_identity == 0 || self.n_cameras == 0 {
            return Err(Error::Config("synthetic dataset counts must be positive".into()));
        }
        if self.n_train_identities > self.n_identities {
            return Err(Error::Config("n_train_identities exceeds n_identities".into()));
        }
        if self.pose_bank().is_empty() || self.backgrounds().is_empty() {
            return Err(Error::Config("pose_bank and backgrounds must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.bag_probability) || !(self.angle_jitter >= 0.0) {
            return Err(Error::Config(
                "bag_probability must be in [0, 1] and angle_jitter >= 0".into(),
            ));
        }
        crate::pose::check_pose_dims((self.dims[0], self.dims[1]))?;
        Ok(())
    }

    pub fn background(&self, camera: usize) -> Rgb8 {
        let b = self.backgrounds();
        b[camera % b.len()]
    }
}

/// Rejection-samples palettes that are separated from each other and from
/// every camera background.
pub fn generate_identities(cfg: &SynthConfig) -> Result<Vec<StickIdentity>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let backgrounds: Vec<[f64; 3]> = (0..cfg.n_cameras).map(|c| unit(cfg.background(c))).collect();
    let mut out: Vec<StickIdentity> = Vec::with_capacity(cfg.n_identities);
    let color = |rng: &mut ChaCha8Rng| -> Rgb8 {
        loop {
            let c: Rgb8 = [rng.random(), rng.random(), rng.random()];
            if backgrounds
                .iter()
                .all(|&b| dist3(unit(c), b) >= MIN_BACKGROUND_CONTRAST)
            {
                return c;
            }
        }
    };
    let mut attempts = 0;
    while out.len() < cfg.n_identities {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Config("could not place separated identity palettes".into()));
        }
        let torso = color(&mut rng);
        let legs = color(&mut rng);
        let head = color(&mut rng);
        let has_bag = rng.random::<f64>() < cfg.bag_probability;
        let bag = color(&mut rng);
        let limb_scale = rng.random_range(0.92..1.08);
        let width_scale = rng.random_range(0.85..1.2);
        let parts = [torso, legs, head];
        let distinct_parts = (0..3).all(|i| (i + 1..3).all(|j| dist3(unit(parts[i]), unit(parts[j])) >= 0.25));
        let palette = Palette {
            torso,
            legs,
            head,
            bag: has_bag.then_some(bag),
        };
        if !distinct_parts
            || out
                .iter()
                .any(|o| o.palette.distance(&palette) < MIN_PALETTE_SEPARATION)
        {
            continue;
        }
        out.push(StickIdentity {
            id: out.len(),
            palette,
            limb_scale,
            width_scale,
        });
    }
    Ok(out)
}

/// Generates the full dataset and its split.
///
/// Cameras are assigned round-robin per identity. Test identities
/// contribute their first image on each camera as a query; the rest go to
/// the gallery.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let identities = generate_identities(cfg)?;
    let dims = (cfg.dims[0], cfg.dims[1]);
    let aspect = (dims.0 as f32) / (dims.1 as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pose_bank = cfg.pose_bank();
    let mut samples = Vec::with_capacity(cfg.n_identities * cfg.images_per_identity);
    let mut split = Split::default();
    for ident in &identities {
        let mut queried = vec![false; cfg.n_cameras];
        for index in 0..cfg.images_per_identity {
            let camera = index % cfg.n_cameras;
            let family = pose_bank[rng.random_range(0..pose_bank.len())];
            let keypoints = family_pose(family, ident, cfg.angle_jitter, aspect, &mut rng);
            let image = render_stickperson(ident, &keypoints, cfg.background(camera), dims);
            let id = sample_id(ident.id, camera, index);
            if ident.id < cfg.n_train_identities {
                split.train.push(id.clone());
            } else if !queried[camera] {
                queried[camera] = true;
                split.query.push(id.clone());
            } else {
                split.gallery.push(id.clone());
            }
            samples.push(Sample {
                id,
                identity: ident.id,
                camera,
                image,
                keypoints,
            });
        }
    }
    Ok(Dataset {
        samples,
        split,
        identities,
    })
}
