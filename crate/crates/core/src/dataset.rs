//! TUM RGB-D sequence ingestion: timestamp association of rgb/depth/ground
//! truth, depth decoding, pinhole back-projection, and gradient-based point
//! selection with appearance labels.

use crate::error::{Error, Result};
use crate::registration::{ColoredPointCloud, Label};
use crate::se3::{Pose, Rotation};
use image::RgbImage;
use nalgebra::{UnitQuaternion, Vector3};
use std::io::BufRead;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Depth units per meter (TUM: 5000).
    pub depth_scale: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn tum_fr1() -> Self {
        CameraIntrinsics {
            fx: 517.3,
            fy: 516.5,
            cx: 318.6,
            cy: 255.3,
            depth_scale: 5000.0,
            width: 640,
            height: 480,
        }
    }

    pub fn tum_fr2() -> Self {
        CameraIntrinsics {
            fx: 520.9,
            fy: 521.0,
            cx: 325.1,
            cy: 249.7,
            depth_scale: 5000.0,
            width: 640,
            height: 480,
        }
    }

    pub fn tum_fr3() -> Self {
        CameraIntrinsics {
            fx: 535.4,
            fy: 539.2,
            cx: 320.1,
            cy: 247.6,
            depth_scale: 5000.0,
            width: 640,
            height: 480,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if self.depth_scale <= 0.0 {
            return Err(Error::InvalidArgument("depth_scale must be positive".into()));
        }
        Ok(())
    }

    /// z * K^-1 * (u, v, 1).
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Pixel coordinates of a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

/// Dense depth in meters; zero or non-finite entries are invalid.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn from_meters(width: u32, height: u32, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), (width * height) as usize);
        DepthMap { width, height, data }
    }

    pub fn decode_png16(img: &image::ImageBuffer<image::Luma<u16>, Vec<u16>>, depth_scale: f64) -> Self {
        let data = img.pixels().map(|p| p[0] as f64 / depth_scale).collect();
        DepthMap::from_meters(img.width(), img.height(), data)
    }

    /// Depth at integer pixel, `None` when out of bounds or invalid.
    pub fn at(&self, u: u32, v: u32) -> Option<f64> {
        if u >= self.width || v >= self.height {
            return None;
        }
        let d = self.data[(v * self.width + u) as usize];
        if d > 0.0 && d.is_finite() {
            Some(d)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
pub struct FramePair {
    pub timestamp: f64,
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub ground_truth: Option<Pose>,
}

impl FramePair {
    /// 8-bit luma image (0.299 R + 0.587 G + 0.114 B).
    pub fn gray(&self) -> image::GrayImage {
        let mut out = image::GrayImage::new(self.rgb.width(), self.rgb.height());
        for (x, y, p) in self.rgb.enumerate_pixels() {
            let g = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
            out.put_pixel(x, y, image::Luma([g.round().clamp(0.0, 255.0) as u8]));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct FrameEntry {
    timestamp: f64,
    rgb_path: PathBuf,
    depth_path: PathBuf,
    ground_truth: Option<Pose>,
}

/// Lazily-decoding iterator over associated frames, ordered by timestamp.
#[derive(Debug)]
pub struct Sequence {
    entries: Vec<FrameEntry>,
    next: usize,
    depth_scale: f64,
    /// RGB frames dropped for lack of a depth match within tolerance.
    pub skipped: usize,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn decode(&self, entry: &FrameEntry) -> Result<FramePair> {
        let rgb = image::open(&entry.rgb_path)
            .map_err(|e| Error::image(&entry.rgb_path, e))?
            .to_rgb8();
        let depth_img = image::open(&entry.depth_path)
            .map_err(|e| Error::image(&entry.depth_path, e))?
            .to_luma16();
        Ok(FramePair {
            timestamp: entry.timestamp,
            rgb,
            depth: DepthMap::decode_png16(&depth_img, self.depth_scale),
            ground_truth: entry.ground_truth.clone(),
        })
    }
}

impl Iterator for Sequence {
    type Item = Result<FramePair>;

    fn next(&mut self) -> Option<Self::Item> {
        let entry = self.entries.get(self.next)?.clone();
        self.next += 1;
        Some(self.decode(&entry))
    }
}

fn read_index(path: &Path) -> Result<Vec<(f64, String)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let ts: f64 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(path, lineno + 1, "bad timestamp"))?;
        let payload = fields
            .next()
            .ok_or_else(|| Error::parse(path, lineno + 1, "missing payload"))?;
        out.push((ts, payload.to_string()));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

/// `groundtruth.txt` lines: timestamp tx ty tz qx qy qz qw.
pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, Pose)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = trimmed
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(path, lineno + 1, "non-numeric field"))?;
        if fields.len() != 8 {
            return Err(Error::parse(path, lineno + 1, "expected 8 fields"));
        }
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            fields[7], fields[4], fields[5], fields[6],
        ));
        let pose = Pose::new(
            Rotation::from_unit_quaternion(&q),
            Vector3::new(fields[1], fields[2], fields[3]),
        );
        out.push((fields[0], pose));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

/// Nearest entry of a timestamp-sorted list within `tol`, greedy per query.
fn nearest_within<T>(sorted: &[(f64, T)], ts: f64, tol: f64) -> Option<usize> {
    if sorted.is_empty() {
        return None;
    }
    let idx = sorted.partition_point(|(t, _)| *t < ts);
    let mut best: Option<usize> = None;
    for cand in [idx.wrapping_sub(1), idx] {
        if let Some((t, _)) = sorted.get(cand) {
            let gap = (t - ts).abs();
            if gap <= tol && best.map_or(true, |b| gap < (sorted[b].0 - ts).abs()) {
                best = Some(cand);
            }
        }
    }
    best
}

/// Loads a TUM-layout sequence directory. RGB frames without a depth match
/// within `tolerance` seconds are skipped (counted and logged); ground truth
/// is attached when `groundtruth.txt` exists.
pub fn load_sequence(dir: &Path, tolerance: f64, depth_scale: f64) -> Result<Sequence> {
    let rgb = read_index(&dir.join("rgb.txt"))?;
    let depth = read_index(&dir.join("depth.txt"))?;
    let gt_path = dir.join("groundtruth.txt");
    let gt = if gt_path.exists() {
        Some(read_trajectory(&gt_path)?)
    } else {
        None
    };

    let mut entries = Vec::new();
    let mut skipped = 0usize;
    let mut used_depth = vec![false; depth.len()];
    for (ts, rgb_file) in &rgb {
        let matched = nearest_within(&depth, *ts, tolerance).filter(|&i| !used_depth[i]);
        match matched {
            Some(i) => {
                used_depth[i] = true;
                let ground_truth = gt
                    .as_deref()
                    .and_then(|g| nearest_within(g, *ts, tolerance))
                    .map(|j| gt.as_deref().unwrap()[j].1.clone());
                entries.push(FrameEntry {
                    timestamp: *ts,
                    rgb_path: dir.join(rgb_file),
                    depth_path: dir.join(&depth[i].1),
                    ground_truth,
                });
            }
            None => {
                skipped += 1;
                log::warn!("no depth frame within {tolerance} s of rgb t={ts}; skipping");
            }
        }
    }
    Ok(Sequence {
        entries,
        next: 0,
        depth_scale,
        skipped,
    })
}

const BLOCK: u32 = 32;
const BASE_THRESHOLD: f64 = 7.0;

/// Gradient-based point selection: per 32x32 block, pixels whose gradient
/// magnitude exceeds block median + constant; blocks short of their share of
/// `target` are topped up with their strongest pixels so flat regions stay
/// covered. One rescale pass if the global count misses target by > 20%.
pub fn select_points(
    frame: &FramePair,
    intr: &CameraIntrinsics,
    target: usize,
) -> Result<ColoredPointCloud> {
    let w = frame.rgb.width();
    let h = frame.rgb.height();
    if w < 3 || h < 3 || target == 0 {
        return Err(Error::InvalidArgument("image too small or zero target".into()));
    }

    // Gray float image and central-difference gradients (border excluded).
    let mut gray = vec![0.0f64; (w * h) as usize];
    for (x, y, p) in frame.rgb.enumerate_pixels() {
        gray[(y * w + x) as usize] =
            0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
    }
    let at = |x: u32, y: u32| gray[(y * w + x) as usize];

    // Candidates: interior pixels with valid depth.
    struct Candidate {
        u: u32,
        v: u32,
        mag: f64,
    }
    let mut blocks: Vec<Vec<Candidate>> = Vec::new();
    let bx = (w - 2).div_ceil(BLOCK);
    let by = (h - 2).div_ceil(BLOCK);
    blocks.resize_with((bx * by) as usize, Vec::new);
    for v in 1..h - 1 {
        for u in 1..w - 1 {
            if frame.depth.at(u, v).is_none() {
                continue;
            }
            let gx = (at(u + 1, v) - at(u - 1, v)) / 2.0;
            let gy = (at(u, v + 1) - at(u, v - 1)) / 2.0;
            let block = ((v - 1) / BLOCK) * bx + (u - 1) / BLOCK;
            blocks[block as usize].push(Candidate {
                u,
                v,
                mag: (gx * gx + gy * gy).sqrt(),
            });
        }
    }
    let n_blocks_nonempty = blocks.iter().filter(|b| !b.is_empty()).count();
    if n_blocks_nonempty == 0 {
        return Err(Error::DegenerateGeometry("no pixels with valid depth".into()));
    }
    let quota = target.div_ceil(n_blocks_nonempty);

    let run = |constant: f64| -> Vec<usize> {
        // Flat index (v * w + u) per selected candidate, gathered per block.
        let mut selected = Vec::new();
        for block in &blocks {
            if block.is_empty() {
                continue;
            }
            let mut mags: Vec<f64> = block.iter().map(|c| c.mag).collect();
            mags.sort_by(f64::total_cmp);
            let median = mags[mags.len() / 2];
            let threshold = median + constant;
            let mut order: Vec<usize> = (0..block.len()).collect();
            order.sort_by(|&a, &b| {
                block[b]
                    .mag
                    .total_cmp(&block[a].mag)
                    .then_with(|| (block[a].v, block[a].u).cmp(&(block[b].v, block[b].u)))
            });
            let mut picked: Vec<usize> = order
                .iter()
                .copied()
                .filter(|&i| block[i].mag > threshold)
                .collect();
            // Top up flat blocks to their quota with the strongest pixels.
            for &i in &order {
                if picked.len() >= quota {
                    break;
                }
                if !picked.contains(&i) {
                    picked.push(i);
                }
            }
            selected.extend(
                picked
                    .iter()
                    .map(|&i| (block[i].v * w + block[i].u) as usize),
            );
        }
        selected
    };

    let mut constant = BASE_THRESHOLD;
    let mut selected = run(constant);
    let deviation = selected.len() as f64 / target as f64;
    if !(0.8..=1.2).contains(&deviation) && selected.len() > 0 {
        constant *= deviation;
        let rescaled = run(constant);
        if !rescaled.is_empty() {
            selected = rescaled;
        }
    }
    // Deterministic raster order regardless of block traversal.
    selected.sort_unstable();
    selected.dedup();

    // Gradient channels normalized so the max selected channel is 1.
    let mut max_grad = 0.0f64;
    let mut points = Vec::with_capacity(selected.len());
    let mut raw_labels: Vec<(f64, f64, f64, f64, f64)> = Vec::with_capacity(selected.len());
    for &flat in &selected {
        let u = (flat as u32) % w;
        let v = (flat as u32) / w;
        let z = frame.depth.at(u, v).expect("selected pixels have depth");
        let gx = (at(u + 1, v) - at(u - 1, v)) / 2.0;
        let gy = (at(u, v + 1) - at(u, v - 1)) / 2.0;
        max_grad = max_grad.max(gx.abs()).max(gy.abs());
        let p = frame.rgb.get_pixel(u, v);
        points.push(intr.backproject(u as f64, v as f64, z));
        raw_labels.push((
            p[0] as f64 / 255.0,
            p[1] as f64 / 255.0,
            p[2] as f64 / 255.0,
            gx.abs(),
            gy.abs(),
        ));
    }
    let grad_norm = if max_grad > 0.0 { max_grad } else { 1.0 };
    let labels: Vec<Label> = raw_labels
        .into_iter()
        .map(|(r, g, b, gx, gy)| [r, g, b, gx / grad_norm, gy / grad_norm])
        .collect();
    ColoredPointCloud::new(points, labels, frame.timestamp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use image::Rgb;

    fn flat_frame(w: u32, h: u32, value: u8, depth: f64) -> FramePair {
        FramePair {
            timestamp: 0.0,
            rgb: RgbImage::from_pixel(w, h, Rgb([value, value, value])),
            depth: DepthMap::from_meters(w, h, vec![depth; (w * h) as usize]),
            ground_truth: None,
        }
    }

    #[test]
    fn backproject_principal_point_is_optical_axis() {
        let intr = CameraIntrinsics::tum_fr1();
        let p = intr.backproject(intr.cx, intr.cy, 1.0);
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn project_backproject_round_trip() {
        let intr = CameraIntrinsics::tum_fr2();
        for (u, v, z) in [(10.0, 20.0, 0.5), (320.0, 240.0, 2.0), (600.0, 470.0, 4.5)] {
            let (pu, pv) = intr.project(&intr.backproject(u, v, z)).unwrap();
            assert!((pu - u).abs() < 1e-6 && (pv - v).abs() < 1e-6);
        }
    }

    #[test]
    fn depth_map_rejects_invalid() {
        let d = DepthMap::from_meters(2, 2, vec![1.0, 0.0, -1.0, f64::NAN]);
        assert_eq!(d.at(0, 0), Some(1.0));
        assert_eq!(d.at(1, 0), None);
        assert_eq!(d.at(0, 1), None);
        assert_eq!(d.at(1, 1), None);
        assert_eq!(d.at(2, 0), None);
    }

    #[test]
    fn uniform_image_still_meets_target() {
        let frame = flat_frame(320, 240, 128, 1.5);
        let intr = CameraIntrinsics::tum_fr1();
        let cloud = select_points(&frame, &intr, 1000).unwrap();
        let n = cloud.len() as f64;
        assert!(
            (800.0..=1200.0).contains(&n),
            "expected ~1000 points, got {n}"
        );
        for label in cloud.labels() {
            for c in label {
                assert!((0.0..=1.0).contains(c));
            }
        }
    }

    #[test]
    fn step_edge_concentrates_selection() {
        let w = 128;
        let h = 128;
        let mut rgb = RgbImage::from_pixel(w, h, Rgb([10, 10, 10]));
        for y in 0..h {
            for x in 64..w {
                rgb.put_pixel(x, y, Rgb([240, 240, 240]));
            }
        }
        let frame = FramePair {
            timestamp: 0.0,
            rgb,
            depth: DepthMap::from_meters(w, h, vec![1.0; (w * h) as usize]),
            ground_truth: None,
        };
        let intr = CameraIntrinsics::tum_fr1();
        let cloud = select_points(&frame, &intr, 300).unwrap();
        // Count points whose pixel column (recovered via projection) lies at
        // the edge.
        let near_edge = cloud
            .points()
            .iter()
            .filter(|p| {
                let (u, _) = intr.project(p).unwrap();
                (62.0..=66.0).contains(&u)
            })
            .count();
        assert!(
            near_edge as f64 >= cloud.len() as f64 * 0.25,
            "edge pixels {near_edge} of {}",
            cloud.len()
        );
        // Max gradient channel hits 1 when a nonzero gradient exists.
        let max_channel = cloud
            .labels()
            .iter()
            .map(|l| l[3].max(l[4]))
            .fold(0.0f64, f64::max)
            ;
        assert_relative_eq!(max_channel, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn all_invalid_depth_is_an_error() {
        let mut frame = flat_frame(64, 64, 100, 1.0);
        frame.depth = DepthMap::from_meters(64, 64, vec![0.0; 64 * 64]);
        let intr = CameraIntrinsics::tum_fr1();
        assert!(select_points(&frame, &intr, 100).is_err());
    }

    #[test]
    fn selection_is_deterministic() {
        let mut rgb = RgbImage::new(96, 96);
        for (x, y, p) in rgb.enumerate_pixels_mut() {
            let v = ((x * 31 + y * 17) % 251) as u8;
            *p = Rgb([v, v.wrapping_add(40), v.wrapping_mul(3)]);
        }
        let frame = FramePair {
            timestamp: 0.0,
            rgb,
            depth: DepthMap::from_meters(96, 96, vec![2.0; 96 * 96]),
            ground_truth: None,
        };
        let intr = CameraIntrinsics::tum_fr3();
        let a = select_points(&frame, &intr, 500).unwrap();
        let b = select_points(&frame, &intr, 500).unwrap();
        assert_eq!(a.points(), b.points());
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn association_pairs_offset_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        // rgb at 0.0,1.0,2.0,3.0,4.0; depth offset by 0.015 except t=2 which
        // is 0.05 away (beyond the 0.02 tolerance) -> 4 pairs, 1 skipped.
        let mut rgb_lines = String::from("# rgb\n");
        let mut depth_lines = String::from("# depth\n");
        for i in 0..5 {
            let t = i as f64;
            rgb_lines.push_str(&format!("{t:.6} rgb/{i}.png\n"));
            let dt = if i == 2 { 0.05 } else { 0.015 };
            depth_lines.push_str(&format!("{:.6} depth/{i}.png\n", t + dt));
        }
        std::fs::write(dir.path().join("rgb.txt"), rgb_lines).unwrap();
        std::fs::write(dir.path().join("depth.txt"), depth_lines).unwrap();
        let seq = load_sequence(dir.path(), 0.02, 5000.0).unwrap();
        assert_eq!(seq.len(), 4);
        assert_eq!(seq.skipped, 1);
    }

    #[test]
    fn sequence_decodes_written_pngs_with_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("rgb")).unwrap();
        std::fs::create_dir_all(dir.path().join("depth")).unwrap();
        let rgb = RgbImage::from_pixel(8, 6, Rgb([10, 200, 30]));
        rgb.save(dir.path().join("rgb/0.png")).unwrap();
        let depth: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
            image::ImageBuffer::from_pixel(8, 6, image::Luma([5000u16]));
        depth.save(dir.path().join("depth/0.png")).unwrap();
        std::fs::write(dir.path().join("rgb.txt"), "1.0 rgb/0.png\n").unwrap();
        std::fs::write(dir.path().join("depth.txt"), "1.001 depth/0.png\n").unwrap();
        std::fs::write(
            dir.path().join("groundtruth.txt"),
            "1.0 1.0 2.0 3.0 0.0 0.0 0.0 1.0\n",
        )
        .unwrap();
        let mut seq = load_sequence(dir.path(), 0.02, 5000.0).unwrap();
        let frame = seq.next().unwrap().unwrap();
        assert_eq!(frame.depth.at(3, 3), Some(1.0));
        assert_eq!(frame.rgb.get_pixel(0, 0), &Rgb([10, 200, 30]));
        let gt = frame.ground_truth.unwrap();
        assert_relative_eq!(*gt.translation(), Vector3::new(1.0, 2.0, 3.0), epsilon = 1e-12);
        assert!(seq.next().is_none());
    }

    #[test]
    fn malformed_index_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("rgb.txt"), "1.0 a.png\nnot-a-number b.png\n").unwrap();
        std::fs::write(dir.path().join("depth.txt"), "1.0 d.png\n").unwrap();
        let err = load_sequence(dir.path(), 0.02, 5000.0).unwrap_err();
        assert!(err.to_string().contains("rgb.txt:2"), "{err}");
    }
}
