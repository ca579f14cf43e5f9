//! Synthetic TUM-format RGB-D sequence: a camera translating around a square
//! loop while facing a color-blocked textured wall, with seeded depth noise
//! so odometry accumulates measurable drift.

use std::io::Write;
use std::path::Path;

pub const WIDTH: u32 = 320;
pub const HEIGHT: u32 = 240;
pub const FX: f64 = 258.6;
pub const FY: f64 = 258.2;
pub const CX: f64 = 159.3;
pub const CY: f64 = 127.6;
pub const DEPTH_SCALE: f64 = 5000.0;
/// Wall plane at z = WALL in world coordinates; camera starts at the origin.
const WALL: f64 = 2.0;

fn hash(x: i64, y: i64, salt: u64) -> u64 {
    let mut h = (x as u64).wrapping_mul(0x9e3779b97f4a7c15)
        ^ (y as u64).wrapping_mul(0xff51afd7ed558ccd)
        ^ salt.wrapping_mul(0xc4ceb9fe1a85ec53);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51afd7ed558ccd);
    h ^= h >> 33;
    h
}

/// Procedural wall texture: 5 cm color blocks with a finer 1 cm brightness
/// modulation, giving both corners and distinctive local patterns.
fn texture(px: f64, py: f64) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [200, 40, 40],
        [40, 200, 40],
        [40, 40, 200],
        [220, 220, 40],
        [40, 210, 210],
        [210, 40, 210],
        [230, 230, 230],
        [30, 30, 30],
    ];
    let bx = (px / 0.05).floor() as i64;
    let by = (py / 0.05).floor() as i64;
    let base = PALETTE[(hash(bx, by, 7) % 8) as usize];
    let fx = (px / 0.01).floor() as i64;
    let fy = (py / 0.01).floor() as i64;
    let mod_ = (hash(fx, fy, 13) % 61) as i16 - 30;
    let mut out = [0u8; 3];
    for (o, b) in out.iter_mut().zip(base.iter()) {
        *o = (*b as i16 + mod_).clamp(0, 255) as u8;
    }
    out
}

/// Camera position at frame k: a square loop in the plane parallel to the
/// wall, 0.03 m per frame, 15 frames per side, returning to the origin after
/// 60 frames.
pub fn camera_position(k: usize) -> (f64, f64) {
    const STEP: f64 = 0.03;
    const SIDE: usize = 15;
    let side = (k / SIDE) % 4;
    let along = (k % SIDE) as f64 * STEP;
    let full = SIDE as f64 * STEP;
    match side {
        0 => (along, 0.0),
        1 => (full, along),
        2 => (full - along, full),
        _ => (0.0, full - along),
    }
}

/// Renders and writes a TUM-layout sequence of `frames` frames plus
/// groundtruth.txt. `depth_noise` is the per-pixel uniform depth noise
/// amplitude in meters, seeded deterministically.
pub fn synthesize_sequence(dir: &Path, frames: usize, depth_noise: f64, seed: u64) {
    std::fs::create_dir_all(dir.join("rgb")).unwrap();
    std::fs::create_dir_all(dir.join("depth")).unwrap();
    let mut rgb_index = String::new();
    let mut depth_index = String::new();
    let mut gt = String::new();
    for k in 0..frames {
        let (cx_w, cy_w) = camera_position(k);
        let mut rgb = image::RgbImage::new(WIDTH, HEIGHT);
        let mut depth = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(WIDTH, HEIGHT);
        for v in 0..HEIGHT {
            for u in 0..WIDTH {
                let z = WALL;
                let px = cx_w + z * (u as f64 - CX) / FX;
                let py = cy_w + z * (v as f64 - CY) / FY;
                rgb.put_pixel(u, v, image::Rgb(texture(px, py)));
                let n = hash(u as i64 + 1000 * k as i64, v as i64, seed ^ 0x5eed);
                let noise = depth_noise * ((n % 2001) as f64 / 1000.0 - 1.0);
                let d = ((z + noise) * DEPTH_SCALE).round().clamp(1.0, 65535.0) as u16;
                depth.put_pixel(u, v, image::Luma([d]));
            }
        }
        let ts = k as f64 / 30.0;
        rgb.save(dir.join(format!("rgb/{k:04}.png"))).unwrap();
        depth.save(dir.join(format!("depth/{k:04}.png"))).unwrap();
        rgb_index.push_str(&format!("{ts:.6} rgb/{k:04}.png\n"));
        depth_index.push_str(&format!("{ts:.6} depth/{k:04}.png\n"));
        gt.push_str(&format!(
            "{ts:.6} {cx_w:.6} {cy_w:.6} 0.0 0.0 0.0 0.0 1.0\n"
        ));
    }
    let mut f = std::fs::File::create(dir.join("rgb.txt")).unwrap();
    f.write_all(rgb_index.as_bytes()).unwrap();
    let mut f = std::fs::File::create(dir.join("depth.txt")).unwrap();
    f.write_all(depth_index.as_bytes()).unwrap();
    let mut f = std::fs::File::create(dir.join("groundtruth.txt")).unwrap();
    f.write_all(gt.as_bytes()).unwrap();
}

pub fn synthetic_intrinsics() -> rkhs_slam::dataset::CameraIntrinsics {
    rkhs_slam::dataset::CameraIntrinsics {
        fx: FX,
        fy: FY,
        cx: CX,
        cy: CY,
        depth_scale: DEPTH_SCALE,
        width: WIDTH,
        height: HEIGHT,
    }
}
