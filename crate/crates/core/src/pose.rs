//! 18-joint skeletons and their colour-coded pose images.
//!
//! Joint order follows the COCO/OpenPose 18-keypoint convention. The text
//! form of a skeleton is one record per image:
//!
//! ```text
//! <image_id> x:y:v,x:y:v,...   (18 triples, v ∈ {0, 1})
//! ```

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::raster::{Image, PoseImage};

pub const NUM_JOINTS: usize = 18;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_eye",
    "left_eye",
    "right_ear",
    "left_ear",
];

pub mod joint {
    pub const NOSE: usize = 0;
    pub const NECK: usize = 1;
    pub const R_SHOULDER: usize = 2;
    pub const R_ELBOW: usize = 3;
    pub const R_WRIST: usize = 4;
    pub const L_SHOULDER: usize = 5;
    pub const L_ELBOW: usize = 6;
    pub const L_WRIST: usize = 7;
    pub const R_HIP: usize = 8;
    pub const R_KNEE: usize = 9;
    pub const R_ANKLE: usize = 10;
    pub const L_HIP: usize = 11;
    pub const L_KNEE: usize = 12;
    pub const L_ANKLE: usize = 13;
    pub const R_EYE: usize = 14;
    pub const L_EYE: usize = 15;
    pub const R_EAR: usize = 16;
    pub const L_EAR: usize = 17;
}

/// The 17 limbs of the COCO 18-keypoint skeleton.
pub const COCO_LIMBS: [(usize, usize); 17] = [
    (1, 2),
    (1, 5),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (1, 0),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Joint {
    pub x: f32,
    pub y: f32,
    pub visible: bool,
}

impl Joint {
    pub const HIDDEN: Joint = Joint {
        x: 0.0,
        y: 0.0,
        visible: false,
    };

    pub fn at(x: f32, y: f32) -> Self {
        Self { x, y, visible: true }
    }
}

/// A validated 18-joint skeleton in normalized image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    joints: [Joint; NUM_JOINTS],
}

impl KeypointSet {
    /// Validates joints; visible joints outside `[0, 1]` are demoted to invisible.
    pub fn new(joints: &[Joint]) -> Result<Self> {
        if joints.len() != NUM_JOINTS {
            return Err(Error::parse(
                "joints",
                format!("expected {NUM_JOINTS} joints, got {}", joints.len()),
            ));
        }
        let mut out = [Joint::HIDDEN; NUM_JOINTS];
        for (i, (o, j)) in out.iter_mut().zip(joints).enumerate() {
            *o = *j;
            if j.visible {
                if !j.x.is_finite() || !j.y.is_finite() {
                    return Err(Error::parse(
                        format!("joint {i} ({})", JOINT_NAMES[i]),
                        "visible joint has a non-finite coordinate",
                    ));
                }
                if !(0.0..=1.0).contains(&j.x) || !(0.0..=1.0).contains(&j.y) {
                    o.visible = false;
                }
            }
        }
        Ok(Self { joints: out })
    }

    pub fn invisible() -> Self {
        Self {
            joints: [Joint::HIDDEN; NUM_JOINTS],
        }
    }

    pub fn joints(&self) -> &[Joint; NUM_JOINTS] {
        &self.joints
    }

    pub fn joint(&self, i: usize) -> Joint {
        self.joints[i]
    }

    pub fn visible_count(&self) -> usize {
        self.joints.iter().filter(|j| j.visible).count()
    }

    /// Mirrors the skeleton top-to-bottom.
    pub fn flipped_vertically(&self) -> Self {
        let mut joints = self.joints;
        for j in &mut joints {
            j.y = 1.0 - j.y;
        }
        Self { joints }
    }

    /// `x:y:v,...` with shortest round-trip float formatting.
    pub fn to_triples(&self) -> String {
        let mut s = String::new();
        for (i, j) in self.joints.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(s, "{}:{}:{}", j.x, j.y, u8::from(j.visible)).unwrap();
        }
        s
    }

    pub fn parse_triples(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.trim().split(',').collect();
        if parts.len() != NUM_JOINTS {
            return Err(Error::parse(
                "joints",
                format!("expected {NUM_JOINTS} joints, got {}", parts.len()),
            ));
        }
        let mut joints = Vec::with_capacity(NUM_JOINTS);
        for (i, part) in parts.iter().enumerate() {
            let fields: Vec<&str> = part.trim().split(':').collect();
            if fields.len() != 3 {
                return Err(Error::parse(
                    format!("joint {i}"),
                    format!("expected x:y:v, got {part:?}"),
                ));
            }
            let num = |k: usize, name: &str| -> Result<f32> {
                fields[k]
                    .parse::<f32>()
                    .map_err(|_| Error::parse(format!("joint {i}.{name}"), format!("not a number: {:?}", fields[k])))
            };
            let (x, y) = (num(0, "x")?, num(1, "y")?);
            let visible = match fields[2] {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::parse(
                        format!("joint {i}.v"),
                        format!("visibility must be 0 or 1, got {other:?}"),
                    ))
                }
            };
            joints.push(Joint { x, y, visible });
        }
        Self::new(&joints)
    }
}

/// Parses one keypoint-file record into `(image_id, skeleton)`.
pub fn parse_keypoints(record: &str) -> Result<(String, KeypointSet)> {
    let record = record.trim();
    let (id, rest) = record
        .split_once(char::is_whitespace)
        .ok_or_else(|| Error::parse("record", "expected `<image_id> <18 x:y:v triples>`"))?;
    if id.is_empty() {
        return Err(Error::parse("image_id", "empty image id"));
    }
    Ok((id.to_string(), KeypointSet::parse_triples(rest)?))
}

pub fn format_keypoints(id: &str, kp: &KeypointSet) -> String {
    format!("{id} {}", kp.to_triples())
}

/// Parses a whole keypoint file, skipping blank lines and `#` comments.
pub fn parse_keypoint_file(text: &str) -> Result<Vec<(String, KeypointSet)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(n, l)| {
            parse_keypoints(l).map_err(|e| match e {
                Error::Parse { field, message } => Error::Parse {
                    field: format!("line {}: {field}", n + 1),
                    message,
                },
                other => other,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Limb {
    pub a: usize,
    pub b: usize,
    /// RGB in `[0, 1]`.
    pub color: [f32; 3],
}

/// Limb topology, colours and stroke sizes used to draw pose images.
#[derive(Clone, Debug, PartialEq)]
pub struct LimbSchema {
    pub limbs: Vec<Limb>,
    pub joint_color: [f32; 3],
    /// Disc radius in pixels; 0 draws no joint discs.
    pub joint_radius: u32,
    /// Square brush width in pixels.
    pub limb_thickness: u32,
}

/// HSV (s = v = 1) to RGB.
fn hue_to_rgb(h: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as u32;
    let f = h6 - h6.floor();
    match sector {
        0 => [1.0, f, 0.0],
        1 => [1.0 - f, 1.0, 0.0],
        2 => [0.0, 1.0, f],
        3 => [0.0, 1.0 - f, 1.0],
        4 => [f, 0.0, 1.0],
        _ => [1.0, 0.0, 1.0 - f],
    }
}

impl LimbSchema {
    /// COCO topology with hues evenly spaced over the limb list and white joints.
    pub fn coco(limb_thickness: u32, joint_radius: u32) -> Self {
        let n = COCO_LIMBS.len();
        Self {
            limbs: COCO_LIMBS
                .iter()
                .enumerate()
                .map(|(i, &(a, b))| Limb {
                    a,
                    b,
                    color: hue_to_rgb(i as f32 / n as f32),
                })
                .collect(),
            joint_color: [1.0, 1.0, 1.0],
            joint_radius,
            limb_thickness,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.limbs.iter().enumerate() {
            if l.a >= NUM_JOINTS || l.b >= NUM_JOINTS {
                return Err(Error::Config(format!("limb {i} references a joint outside 0..18")));
            }
        }
        let mut colors: Vec<[f32; 3]> = self.limbs.iter().map(|l| l.color).collect();
        colors.push(self.joint_color);
        for i in 0..colors.len() {
            for j in i + 1..colors.len() {
                if colors[i] == colors[j] {
                    return Err(Error::Config("limb schema colours must be pairwise distinct".into()));
                }
            }
        }
        if self.limb_thickness == 0 {
            return Err(Error::Config("limb thickness must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for LimbSchema {
    fn default() -> Self {
        Self::coco(2, 1)
    }
}

/// Pixel coordinates (column, row) of a normalized joint.
pub fn to_pixel(j: Joint, dims: (usize, usize)) -> (i64, i64) {
    let (h, w) = dims;
    (
        (j.x * (w - 1) as f32).round() as i64,
        (j.y * (h - 1) as f32).round() as i64,
    )
}

/// Integer Bresenham line, endpoints included.
pub fn bresenham(p0: (i64, i64), p1: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = p0;
    let dx = (p1.0 - x).abs();
    let dy = -(p1.1 - y).abs();
    let sx = if x < p1.0 { 1 } else { -1 };
    let sy = if y < p1.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        out.push((x, y));
        if (x, y) == p1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// Brush offsets for a square stroke of the given width.
fn brush(thickness: u32) -> std::ops::RangeInclusive<i64> {
    let t = thickness.max(1) as i64;
    -((t - 1) / 2)..=(t / 2)
}

/// Visits every in-bounds pixel covered by a thick segment.
pub fn stroke_segment(
    p0: (i64, i64),
    p1: (i64, i64),
    thickness: u32,
    dims: (usize, usize),
    mut f: impl FnMut(usize, usize),
) {
    let (h, w) = (dims.0 as i64, dims.1 as i64);
    for (x, y) in bresenham(p0, p1) {
        for dy in brush(thickness) {
            for dx in brush(thickness) {
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && px < w && py < h {
                    f(py as usize, px as usize);
                }
            }
        }
    }
}

/// Visits every in-bounds pixel whose centre lies within `radius` of `c`.
pub fn fill_disc(c: (i64, i64), radius: u32, dims: (usize, usize), mut f: impl FnMut(usize, usize)) {
    let r = radius as i64;
    let (h, w) = (dims.0 as i64, dims.1 as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let (px, py) = (c.0 + dx, c.1 + dy);
            if px >= 0 && py >= 0 && px < w && py < h {
                f(py as usize, px as usize);
            }
        }
    }
}

pub fn check_pose_dims(dims: (usize, usize)) -> Result<()> {
    let (h, w) = dims;
    if h != 2 * w || w < 8 {
        return Err(Error::Shape(format!(
            "pose images need H = 2·W with W ≥ 8, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Maps a `[0, 1]` colour into image range `[-1, 1]`.
pub fn to_signed(rgb: [f32; 3]) -> [f32; 3] {
    rgb.map(|c| 2.0 * c - 1.0)
}

/// Renders a skeleton as a pose image: background −1, hard-edged limbs in
/// schema order (later limbs overpaint earlier ones), then joint discs.
pub fn rasterize_pose(kp: &KeypointSet, schema: &LimbSchema, dims: (usize, usize)) -> Result<PoseImage> {
    check_pose_dims(dims)?;
    let mut img = Image::filled(dims.0, dims.1, [-1.0; 3]);
    for limb in &schema.limbs {
        let (a, b) = (kp.joint(limb.a), kp.joint(limb.b));
        if !(a.visible && b.visible) {
            continue;
        }
        let color = to_signed(limb.color);
        stroke_segment(
            to_pixel(a, dims),
            to_pixel(b, dims),
            schema.limb_thickness,
            dims,
            |y, x| img.set_pixel(y, x, color),
        );
    }
    if schema.joint_radius > 0 {
        let color = to_signed(schema.joint_color);
        for j in kp.joints().iter().filter(|j| j.visible) {
            fill_disc(to_pixel(*j, dims), schema.joint_radius, dims, |y, x| {
                img.set_pixel(y, x, color)
            });
        }
    }
    Ok(img)
}
