//! Procedural person renderer.
//!
//! A person is a silhouette (identity-correlated geometry), skin and hair
//! colors, a face pattern, and a set of outfits. Every pixel the renderer
//! writes is labeled with the category that produced it, so the parsing mask
//! is exact.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;

pub type Rgb = [f64; 3];

pub const BACKGROUND: u8 = 0;
pub const HEAD: u8 = 1;
pub const ARM: u8 = 2;
pub const LEG: u8 = 3;
pub const UPPER_CLOTHES: u8 = 4;
pub const LOWER_CLOTHES: u8 = 5;

/// Cells per side of the identity texture inside the face.
pub const FACE_TEXTURE_CELLS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacePattern {
    pub skin: Rgb,
    pub hair: Rgb,
    pub eye_row: f64,
    pub eye_sep: f64,
    pub eye_color: Rgb,
    pub mouth_row: f64,
    pub mouth_width: f64,
    pub mouth_color: Rgb,
    /// `FACE_TEXTURE_CELLS²` additive tints, row-major.
    pub texture: Vec<Rgb>,
}

/// Silhouette geometry as fractions of the image height (`_h`) or width (`_w`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyShape {
    pub head_radius_h: f64,
    pub shoulder_w: f64,
    pub torso_h: f64,
    pub lower_h: f64,
    pub hip_w: f64,
    pub leg_w: f64,
    pub arm_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonSpec {
    pub identity_id: usize,
    pub face_pattern: FacePattern,
    pub body_shape: BodyShape,
    pub num_outfits: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pattern {
    Solid,
    HorizontalStripes,
    VerticalStripes,
    Checker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Garment {
    pub base: Rgb,
    pub accent: Rgb,
    pub pattern: Pattern,
    pub period: i64,
}

impl Garment {
    /// Texture color at a position relative to the person's anchor.
    pub fn color_at(&self, row: i64, col: i64) -> Rgb {
        let p = self.period.max(1);
        let on = match self.pattern {
            Pattern::Solid => false,
            Pattern::HorizontalStripes => row.div_euclid(p) % 2 == 1,
            Pattern::VerticalStripes => col.div_euclid(p) % 2 == 1,
            Pattern::Checker => (row.div_euclid(p) + col.div_euclid(p)) % 2 == 1,
        };
        if on {
            self.accent
        } else {
            self.base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outfit {
    pub upper: Garment,
    pub lower: Garment,
}

/// Per-sample nuisance parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub dy: i64,
    pub dx: i64,
    pub brightness: f64,
    pub background: Rgb,
    /// Sub-cell shift of the face pattern, in face units.
    pub face_shift: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

fn uniform_rgb(rng: &mut impl Rng, lo: f64, hi: f64) -> Rgb {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

impl PersonSpec {
    /// Pure function of `(dataset_seed, identity_id)`.
    pub fn derive(dataset_seed: u64, identity_id: usize, num_outfits: usize) -> Self {
        let mut rng = seed::rng(dataset_seed, &[seed::PERSON, identity_id as u64]);
        let r = rng.random_range(0.45..0.95);
        let g = r * rng.random_range(0.6..0.85);
        let b = g * rng.random_range(0.6..0.9);
        let skin = [r, g, b];
        let hair = uniform_rgb(&mut rng, 0.02, 0.35);
        let texture = (0..FACE_TEXTURE_CELLS * FACE_TEXTURE_CELLS)
            .map(|_| uniform_rgb(&mut rng, -0.2, 0.2))
            .collect();
        let face_pattern = FacePattern {
            skin,
            hair,
            eye_row: rng.random_range(0.3..0.45),
            eye_sep: rng.random_range(0.3..0.5),
            eye_color: uniform_rgb(&mut rng, 0.0, 0.6),
            mouth_row: rng.random_range(0.68..0.82),
            mouth_width: rng.random_range(0.2..0.5),
            mouth_color: [rng.random_range(0.4..0.9), rng.random_range(0.05..0.3), rng.random_range(0.05..0.35)],
            texture,
        };
        let body_shape = BodyShape {
            head_radius_h: rng.random_range(0.085..0.11),
            shoulder_w: rng.random_range(0.42..0.62),
            torso_h: rng.random_range(0.28..0.36),
            lower_h: rng.random_range(0.12..0.2),
            hip_w: rng.random_range(0.75..0.95),
            leg_w: rng.random_range(0.12..0.18),
            arm_w: rng.random_range(0.09..0.14),
        };
        Self {
            identity_id,
            face_pattern,
            body_shape,
            num_outfits,
        }
    }
}

fn garment(rng: &mut impl Rng) -> Garment {
    let pattern = match rng.random_range(0..4) {
        0 => Pattern::Solid,
        1 => Pattern::HorizontalStripes,
        2 => Pattern::VerticalStripes,
        _ => Pattern::Checker,
    };
    Garment {
        base: uniform_rgb(rng, 0.0, 1.0),
        accent: uniform_rgb(rng, 0.0, 1.0),
        pattern,
        period: rng.random_range(2..5),
    }
}

impl Outfit {
    pub fn derive(dataset_seed: u64, identity_id: usize, clothing_id: usize) -> Self {
        let mut rng = seed::rng(dataset_seed, &[seed::OUTFIT, identity_id as u64, clothing_id as u64]);
        Self {
            upper: garment(&mut rng),
            lower: garment(&mut rng),
        }
    }
}

impl FacePattern {
    /// Face color at normalized coordinates `(u, v)` (row, column) in `[0, 1)`.
    pub fn color_at(&self, u: f64, v: f64) -> Rgb {
        if u < 0.12 {
            return self.hair;
        }
        let eye = |cv: f64| ((u - self.eye_row).powi(2) + (v - cv).powi(2)).sqrt() < 0.09;
        if eye(0.5 - self.eye_sep / 2.0) || eye(0.5 + self.eye_sep / 2.0) {
            return self.eye_color;
        }
        if (u - self.mouth_row).abs() < 0.05 && (v - 0.5).abs() < self.mouth_width / 2.0 {
            return self.mouth_color;
        }
        let n = FACE_TEXTURE_CELLS as f64;
        let cr = ((u * n).floor() as usize).min(FACE_TEXTURE_CELLS - 1);
        let cc = ((v * n).floor() as usize).min(FACE_TEXTURE_CELLS - 1);
        let t = self.texture[cr * FACE_TEXTURE_CELLS + cc];
        [
            (self.skin[0] + t[0]).clamp(0.0, 1.0),
            (self.skin[1] + t[1]).clamp(0.0, 1.0),
            (self.skin[2] + t[2]).clamp(0.0, 1.0),
        ]
    }

    /// Point-sample the face at `h × w` (HWC), shifted by `shift` and scaled by `brightness`.
    pub fn render(&self, h: usize, w: usize, shift: (f64, f64), brightness: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(h * w * 3);
        for i in 0..h {
            for j in 0..w {
                let u = ((i as f64 + 0.5) / h as f64 + shift.0).clamp(0.0, 0.999);
                let v = ((j as f64 + 0.5) / w as f64 + shift.1).clamp(0.0, 0.999);
                let c = self.color_at(u, v);
                out.extend(c.iter().map(|x| (x * brightness).clamp(0.0, 1.0)));
            }
        }
        out
    }
}

/// A noise-free rendering: HWC image, per-pixel category codes, and the face box.
#[derive(Debug, Clone)]
pub struct Rendering {
    pub image: Vec<f64>,
    pub mask: Vec<u8>,
    pub face_box: Option<FaceBox>,
    /// Anchor (row, col) that garment textures are expressed relative to.
    pub anchor: (i64, i64),
}

pub fn render_person(
    person: &PersonSpec,
    outfit: &Outfit,
    pose: &Pose,
    face_visible: bool,
    height: usize,
    width: usize,
) -> Rendering {
    let (hf, wf) = (height as f64, width as f64);
    let s = &person.body_shape;
    let mut image = Vec::with_capacity(height * width * 3);
    for _ in 0..height * width {
        image.extend_from_slice(&pose.background);
    }
    let mut mask = vec![BACKGROUND; height * width];

    let cx = (wf / 2.0) as i64 + pose.dx;
    let head_r = s.head_radius_h * hf;
    let head_cy = (0.04 * hf + head_r).round() as i64 + pose.dy;
    let torso_top = head_cy + head_r.round() as i64;
    let torso_len = (s.torso_h * hf).round() as i64;
    let shoulder = ((s.shoulder_w * wf).round() as i64).max(4);
    let lower_top = torso_top + torso_len;
    let lower_len = (s.lower_h * hf).round() as i64;
    let hip = ((s.hip_w * shoulder as f64).round() as i64).max(4);
    let leg_w = ((s.leg_w * wf).round() as i64).max(2);
    let arm_w = ((s.arm_w * wf).round() as i64).max(2);
    let legs_bottom = height as i64 - 2 + pose.dy.min(1);
    let anchor = (torso_top, cx);

    let mut paint = |r: i64, c: i64, code: u8, color: Rgb| {
        if r < 0 || c < 0 || r >= height as i64 || c >= width as i64 {
            return;
        }
        let idx = r as usize * width + c as usize;
        mask[idx] = code;
        for k in 0..3 {
            image[idx * 3 + k] = (color[k] * pose.brightness).clamp(0.0, 1.0);
        }
    };

    // arms (sleeve covers the top quarter)
    let arm_top = torso_top + 1;
    let arm_len = (0.9 * torso_len as f64).round() as i64;
    let sleeve = arm_len / 4;
    for r in arm_top..arm_top + arm_len {
        for side in [-1i64, 1] {
            for k in 0..arm_w {
                let c = if side < 0 { cx - shoulder / 2 - 1 - k } else { cx + shoulder / 2 + k };
                if r < arm_top + sleeve {
                    paint(r, c, UPPER_CLOTHES, outfit.upper.color_at(r - anchor.0, c - anchor.1));
                } else {
                    paint(r, c, ARM, person.face_pattern.skin);
                }
            }
        }
    }
    // legs
    let gap = (hip - 2 * leg_w).max(1);
    for r in lower_top + lower_len..legs_bottom {
        for k in 0..leg_w {
            paint(r, cx - gap / 2 - 1 - k, LEG, person.face_pattern.skin);
            paint(r, cx + gap / 2 + k, LEG, person.face_pattern.skin);
        }
    }
    // torso and lower garment
    for r in torso_top..lower_top {
        for c in cx - shoulder / 2..cx + shoulder / 2 {
            paint(r, c, UPPER_CLOTHES, outfit.upper.color_at(r - anchor.0, c - anchor.1));
        }
    }
    for r in lower_top..lower_top + lower_len {
        for c in cx - hip / 2..cx + hip / 2 {
            paint(r, c, LOWER_CLOTHES, outfit.lower.color_at(r - anchor.0, c - anchor.1));
        }
    }
    // head: hair cap, then skin, then the face patch
    let r_ceil = head_r.ceil() as i64;
    for r in head_cy - r_ceil..=head_cy + r_ceil {
        for c in cx - r_ceil..=cx + r_ceil {
            let d = (((r - head_cy) as f64 + 0.5).powi(2) + ((c - cx) as f64 + 0.5).powi(2)).sqrt();
            if d <= head_r {
                let hair = !face_visible || (r as f64) < head_cy as f64 - 0.45 * head_r;
                let color = if hair { person.face_pattern.hair } else { person.face_pattern.skin };
                paint(r, c, HEAD, color);
            }
        }
    }
    let mut face_box = None;
    if face_visible {
        let side = ((1.3 * head_r).round() as i64).max(3);
        let top = head_cy - side / 2 + (0.15 * head_r).round() as i64;
        let left = cx - side / 2;
        let top_c = top.max(0);
        let left_c = left.max(0);
        let bottom = (top + side).min(height as i64);
        let right = (left + side).min(width as i64);
        if bottom > top_c && right > left_c {
            let patch = person.face_pattern.render(side as usize, side as usize, pose.face_shift, 1.0);
            for r in top_c..bottom {
                for c in left_c..right {
                    let pi = ((r - top) * side + (c - left)) as usize;
                    paint(r, c, HEAD, [patch[pi * 3], patch[pi * 3 + 1], patch[pi * 3 + 2]]);
                }
            }
            face_box = Some(FaceBox {
                top: top_c as usize,
                left: left_c as usize,
                height: (bottom - top_c) as usize,
                width: (right - left_c) as usize,
            });
        }
    }
    Rendering {
        image,
        mask,
        face_box,
        anchor,
    }
}

pub fn sample_pose(rng: &mut impl Rng, height: usize, width: usize) -> Pose {
    let max_dx = (width / 16).max(1) as i64;
    let max_dy = (height / 32).max(1) as i64;
    Pose {
        dy: rng.random_range(-max_dy..=max_dy),
        dx: rng.random_range(-max_dx..=max_dx),
        brightness: rng.random_range(0.85..1.15),
        background: uniform_rgb(rng, 0.15, 0.55),
        face_shift: (rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04)),
    }
}
