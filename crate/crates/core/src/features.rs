//! Oriented multi-scale corner features with 256-bit binary descriptors,
//! matched under Hamming distance. FAST segment-test corners, intensity
//! centroid orientation, and a steered random-pair binary descriptor over a
//! box-smoothed patch.

use crate::dataset::DepthMap;
use image::imageops::{self, FilterType};
use image::GrayImage;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::sync::OnceLock;

const PYRAMID_LEVELS: usize = 3;
const PYRAMID_SCALE: f64 = 1.2;
const FAST_THRESHOLD: i16 = 20;
const PATCH_MARGIN: u32 = 20;
const ORIENTATION_RADIUS: i32 = 15;
const MAX_FEATURES: usize = 1500;

#[derive(Debug, Clone, Copy)]
pub struct Keypoint {
    /// Pixel coordinates at full resolution.
    pub u: f64,
    pub v: f64,
    pub level: usize,
    pub orientation: f64,
    pub response: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Descriptor(pub [u8; 32]);

impl Descriptor {
    pub fn hamming(&self, other: &Descriptor) -> u32 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

/// Keypoints, descriptors and per-keypoint depths; entries without valid
/// depth are dropped at extraction time.
#[derive(Debug, Clone, Default)]
pub struct FeatureSet {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
    pub depths: Vec<f64>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

/// Fixed descriptor sampling pattern, generated once from a constant seed.
fn brief_pattern() -> &'static [(i32, i32, i32, i32); 256] {
    static PATTERN: OnceLock<[(i32, i32, i32, i32); 256]> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut rng = StdRng::seed_from_u64(0x0b5e55ed);
        let mut out = [(0, 0, 0, 0); 256];
        for slot in out.iter_mut() {
            *slot = (
                rng.gen_range(-13..=13),
                rng.gen_range(-13..=13),
                rng.gen_range(-13..=13),
                rng.gen_range(-13..=13),
            );
        }
        out
    })
}

struct Integral {
    width: usize,
    height: usize,
    data: Vec<u64>,
}

impl Integral {
    fn build(img: &GrayImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0u64; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u64;
            for x in 0..w {
                row += img.get_pixel(x as u32, y as u32)[0] as u64;
                data[(y + 1) * (w + 1) + (x + 1)] = data[y * (w + 1) + (x + 1)] + row;
            }
        }
        Integral {
            width: w,
            height: h,
            data,
        }
    }

    /// 5x5 box sum centered at (x, y), clamped to the image.
    fn smooth(&self, x: i32, y: i32) -> i32 {
        let x0 = (x - 2).clamp(0, self.width as i32 - 1) as usize;
        let y0 = (y - 2).clamp(0, self.height as i32 - 1) as usize;
        let x1 = (x + 3).clamp(1, self.width as i32) as usize;
        let y1 = (y + 3).clamp(1, self.height as i32) as usize;
        let s = self.data[y1 * (self.width + 1) + x1] + self.data[y0 * (self.width + 1) + x0]
            - self.data[y0 * (self.width + 1) + x1]
            - self.data[y1 * (self.width + 1) + x0];
        s as i32
    }
}

const FAST_CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

/// FAST-9 segment test score; 0 when not a corner.
fn fast_score(img: &GrayImage, x: u32, y: u32) -> f64 {
    let c = img.get_pixel(x, y)[0] as i16;
    let mut brighter = [false; 16];
    let mut darker = [false; 16];
    let mut score_sum = 0i32;
    for (k, (dx, dy)) in FAST_CIRCLE.iter().enumerate() {
        let p = img.get_pixel((x as i32 + dx) as u32, (y as i32 + dy) as u32)[0] as i16;
        brighter[k] = p >= c + FAST_THRESHOLD;
        darker[k] = p <= c - FAST_THRESHOLD;
        score_sum += (p - c).abs() as i32;
    }
    let has_arc = |mask: &[bool; 16]| -> bool {
        let mut run = 0;
        // Wrap the circle to catch arcs crossing index 0.
        for k in 0..32 {
            if mask[k % 16] {
                run += 1;
                if run >= 9 {
                    return true;
                }
            } else {
                run = 0;
            }
        }
        false
    };
    if has_arc(&brighter) || has_arc(&darker) {
        score_sum as f64
    } else {
        0.0
    }
}

fn orientation(img: &GrayImage, x: i32, y: i32) -> f64 {
    let mut m01 = 0.0;
    let mut m10 = 0.0;
    for dy in -ORIENTATION_RADIUS..=ORIENTATION_RADIUS {
        let span = ((ORIENTATION_RADIUS * ORIENTATION_RADIUS - dy * dy) as f64).sqrt() as i32;
        for dx in -span..=span {
            let p = img.get_pixel((x + dx) as u32, (y + dy) as u32)[0] as f64;
            m10 += dx as f64 * p;
            m01 += dy as f64 * p;
        }
    }
    m01.atan2(m10)
}

fn describe(integral: &Integral, x: i32, y: i32, theta: f64) -> Descriptor {
    let (s, c) = theta.sin_cos();
    let mut bytes = [0u8; 32];
    for (bit, &(ax, ay, bx, by)) in brief_pattern().iter().enumerate() {
        let rot = |px: i32, py: i32| -> (i32, i32) {
            let rx = c * px as f64 - s * py as f64;
            let ry = s * px as f64 + c * py as f64;
            (rx.round() as i32, ry.round() as i32)
        };
        let (axr, ayr) = rot(ax, ay);
        let (bxr, byr) = rot(bx, by);
        let ia = integral.smooth(x + axr, y + ayr);
        let ib = integral.smooth(x + bxr, y + byr);
        if ia < ib {
            bytes[bit / 8] |= 1 << (bit % 8);
        }
    }
    Descriptor(bytes)
}

/// Extracts oriented corner features with binary descriptors, dropping
/// keypoints without valid depth. Deterministic for identical input.
pub fn extract_features(gray: &GrayImage, depth: &DepthMap) -> FeatureSet {
    let mut pyramid: Vec<(GrayImage, f64)> = vec![(gray.clone(), 1.0)];
    for level in 1..PYRAMID_LEVELS {
        let scale = PYRAMID_SCALE.powi(level as i32);
        let w = (gray.width() as f64 / scale).round() as u32;
        let h = (gray.height() as f64 / scale).round() as u32;
        if w < 2 * PATCH_MARGIN + 8 || h < 2 * PATCH_MARGIN + 8 {
            break;
        }
        pyramid.push((imageops::resize(gray, w, h, FilterType::Triangle), scale));
    }

    let mut all: Vec<(Keypoint, Descriptor)> = Vec::new();
    for (level, (img, scale)) in pyramid.iter().enumerate() {
        let integral = Integral::build(img);
        let (w, h) = (img.width(), img.height());
        // Score map for 3x3 non-max suppression.
        let mut scores = vec![0f64; (w * h) as usize];
        for y in PATCH_MARGIN..h - PATCH_MARGIN {
            for x in PATCH_MARGIN..w - PATCH_MARGIN {
                scores[(y * w + x) as usize] = fast_score(img, x, y);
            }
        }
        for y in PATCH_MARGIN..h - PATCH_MARGIN {
            for x in PATCH_MARGIN..w - PATCH_MARGIN {
                let s = scores[(y * w + x) as usize];
                if s <= 0.0 {
                    continue;
                }
                let mut is_max = true;
                'nms: for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let n = scores[((y as i32 + dy) as u32 * w + (x as i32 + dx) as u32)
                            as usize];
                        if n > s || (n == s && (dy < 0 || (dy == 0 && dx < 0))) {
                            is_max = false;
                            break 'nms;
                        }
                    }
                }
                if !is_max {
                    continue;
                }
                let theta = orientation(img, x as i32, y as i32);
                let desc = describe(&integral, x as i32, y as i32, theta);
                all.push((
                    Keypoint {
                        u: x as f64 * scale,
                        v: y as f64 * scale,
                        level,
                        orientation: theta,
                        response: s,
                    },
                    desc,
                ));
            }
        }
    }

    // Strongest first; ties broken by position for determinism.
    all.sort_by(|a, b| {
        b.0.response
            .partial_cmp(&a.0.response)
            .unwrap()
            .then(a.0.v.partial_cmp(&b.0.v).unwrap())
            .then(a.0.u.partial_cmp(&b.0.u).unwrap())
            .then(a.0.level.cmp(&b.0.level))
    });
    all.truncate(MAX_FEATURES);

    let mut set = FeatureSet::default();
    for (kp, desc) in all {
        let u = kp.u.round() as i64;
        let v = kp.v.round() as i64;
        if u < 0 || v < 0 || u >= depth.width as i64 || v >= depth.height as i64 {
            continue;
        }
        match depth.at(u as u32, v as u32) {
            Some(d) if d > 0.0 && d.is_finite() => {
                set.keypoints.push(kp);
                set.descriptors.push(desc);
                set.depths.push(d);
            }
            _ => {}
        }
    }
    set
}

/// Hamming nearest-neighbor matching with a best/second-best ratio test.
/// Returns index pairs (into `a`, into `b`).
pub fn match_features(a: &FeatureSet, b: &FeatureSet, ratio: f64) -> Vec<(usize, usize)> {
    let mut matches = Vec::new();
    if b.is_empty() {
        return matches;
    }
    for (ia, da) in a.descriptors.iter().enumerate() {
        let mut best = u32::MAX;
        let mut second = u32::MAX;
        let mut best_j = 0usize;
        for (ib, db) in b.descriptors.iter().enumerate() {
            let d = da.hamming(db);
            if d < best {
                second = best;
                best = d;
                best_j = ib;
            } else if d < second {
                second = d;
            }
        }
        let ok = if second == u32::MAX {
            true
        } else {
            (best as f64) < ratio * (second as f64)
        };
        if ok {
            matches.push((ia, best_j));
        }
    }
    matches
}
