//! End-to-end batch pipeline: per-frame tracking, local-graph optimization
//! and merging, loop-closure detection on merge, keyframe-scope and final
//! optimization, and artifact export.

use crate::bow::Vocabulary;
use crate::config::{Mode, RunConfig, SolverConfig};
use crate::dataset::{load_sequence, select_points, CameraIntrinsics, DepthMap, FramePair};
use crate::error::{Error, Result};
use crate::evaluation::{ate_rmse, format_tum_line, rpe_rmse, TrajectoryEstimate};
use crate::features::extract_features;
use crate::frontend::{LocalPoseGraph, Tracker};
use crate::loop_closure::{detect_candidates, match_and_ransac, validate_and_refine, LoopClosure};
use crate::pose_graph::{
    write_g2o, EdgeKind, OptimizeScope, PoseGraph, PoseGraphEdge, PoseGraphNode,
};
use crate::se3::Pose;
use image::GrayImage;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, serde::Serialize)]
pub struct RunSummary {
    pub frames: usize,
    pub keyframes: usize,
    pub loop_closures: usize,
    pub skipped_frames: usize,
    pub ate_rmse_m: Option<f64>,
    pub rpe_translational_m_per_s: Option<f64>,
    pub rpe_rotational_deg_per_s: Option<f64>,
}

/// Number of keyframes at which an online vocabulary is trained when none
/// was supplied.
const VOCAB_TRAIN_KEYFRAMES: usize = 4;

struct Backend {
    graph: PoseGraph,
    vocab: Option<Vocabulary>,
    vocab_is_final: bool,
    loop_closures: Vec<LoopClosure>,
}

struct FrameStore {
    index: usize,
    gray: GrayImage,
    depth: DepthMap,
}

/// Runs the full pipeline for a configuration. When the `parallel` feature is
/// active and `CVO_THREADS` is set, registration inner loops run on a pool of
/// that many threads.
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    #[cfg(feature = "parallel")]
    if let Ok(threads) = std::env::var("CVO_THREADS") {
        let n: usize = threads
            .parse()
            .map_err(|_| Error::Config(format!("CVO_THREADS='{threads}' is not a number")))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
        return pool.install(|| run_inner(cfg));
    }
    run_inner(cfg)
}

fn run_inner(cfg: &RunConfig) -> Result<RunSummary> {
    let intr = cfg.resolve_intrinsics()?;
    let out_dir = &cfg.run.output;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut frontend_log = std::io::BufWriter::new(
        std::fs::File::create(out_dir.join("frontend.log"))
            .map_err(|e| Error::io(out_dir.join("frontend.log"), e))?,
    );

    let sequence = load_sequence(
        &cfg.dataset.path,
        cfg.dataset.association_tolerance,
        cfg.dataset.depth_scale,
    )?;
    let skipped_frames = sequence.skipped;

    let mut backend = Backend {
        graph: PoseGraph::new(),
        vocab: match &cfg.run.vocabulary {
            Some(path) => Some(Vocabulary::load(path)?),
            None => None,
        },
        vocab_is_final: cfg.run.vocabulary.is_some(),
        loop_closures: Vec::new(),
    };

    let mut tracker: Option<Tracker> = None;
    let mut prev_store: Option<FrameStore> = None;
    let mut timestamps: Vec<(usize, f64)> = Vec::new();
    let mut trajectory: Vec<(usize, f64, Pose)> = Vec::new();
    let mut gt_entries: Vec<(f64, Pose)> = Vec::new();

    let limit = cfg.run.max_frames.unwrap_or(usize::MAX);
    for (frame_index, frame) in sequence.enumerate() {
        if frame_index >= limit {
            break;
        }
        let frame: FramePair = frame?;
        let cloud = select_points(&frame, &intr, cfg.dataset.point_target)?;
        timestamps.push((frame_index, frame.timestamp));
        if let Some(gt) = &frame.ground_truth {
            gt_entries.push((frame.timestamp, gt.clone()));
        }
        let store = FrameStore {
            index: frame_index,
            gray: frame.gray(),
            depth: frame.depth,
        };

        match tracker.as_mut() {
            None => {
                let mut t = Tracker::new(
                    cloud,
                    frame_index,
                    cfg.registration.clone(),
                    cfg.frontend.clone(),
                )?;
                attach_keyframe_features(&mut t, 0, &store, &backend.vocab);
                trajectory.push((frame_index, frame.timestamp, Pose::identity()));
                tracker = Some(t);
            }
            Some(t) => {
                let out = t.track_frame(cloud, frame_index)?;
                writeln!(frontend_log, "{}", out.log.to_line())
                    .map_err(|e| Error::io(out_dir.join("frontend.log"), e))?;
                trajectory.push((frame_index, frame.timestamp, out.global_pose.clone()));

                if let Some(kf_idx) = out.new_keyframe_index {
                    // The promoted keyframe is the previous frame; its image
                    // is still in the one-frame store.
                    let promoted = prev_store.as_ref().filter(|s| {
                        s.index == t.keyframes()[kf_idx].frame_index
                    });
                    if let Some(store) = promoted {
                        attach_keyframe_features(t, kf_idx, store, &backend.vocab);
                    } else {
                        log::warn!(
                            "keyframe {} has no stored image; loop closure will skip it",
                            kf_idx
                        );
                    }
                }
                if let Some(local) = out.emitted {
                    process_local_graph(local, t, &mut backend, cfg, &intr)?;
                }
            }
        }
        prev_store = Some(store);
    }

    let Some(mut tracker) = tracker else {
        return Err(Error::InvalidArgument("sequence contains no frames".into()));
    };

    let final_local = tracker.finish();
    process_local_graph(final_local, &mut tracker, &mut backend, cfg, &intr)?;

    if cfg.run.mode == Mode::Slam && backend.graph.nodes().len() > 1 {
        backend.graph.optimize(
            OptimizeScope::Full,
            cfg.solver.final_max_iterations,
            cfg.solver.term_tolerance,
        )?;
    }

    // Final trajectory: optimized node poses where available.
    for (id, _, pose) in trajectory.iter_mut() {
        if let Some(node) = backend.graph.node(*id) {
            *pose = node.pose.clone();
        }
    }
    frontend_log
        .flush()
        .map_err(|e| Error::io(out_dir.join("frontend.log"), e))?;

    write_outputs(cfg, out_dir, &trajectory, &tracker, &backend)?;
    // Associated ground truth rides along so downstream evaluation and plot
    // export can run from the output directory alone.
    if gt_entries.len() >= 3 {
        let gt_path = out_dir.join("groundtruth.txt");
        let mut out = String::new();
        for (ts, pose) in &gt_entries {
            out.push_str(&format_tum_line(*ts, pose));
            out.push('\n');
        }
        std::fs::write(&gt_path, out).map_err(|e| Error::io(&gt_path, e))?;
    }

    let summary = summarize(cfg, &trajectory, &tracker, &backend, &gt_entries, skipped_frames)?;
    let metrics_path = out_dir.join("metrics.json");
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Internal(format!("metrics serialization: {e}")))?;
    std::fs::write(&metrics_path, json).map_err(|e| Error::io(&metrics_path, e))?;
    Ok(summary)
}

fn attach_keyframe_features(
    tracker: &mut Tracker,
    kf_idx: usize,
    store: &FrameStore,
    vocab: &Option<Vocabulary>,
) {
    let features = extract_features(&store.gray, &store.depth);
    let kf = &mut tracker.keyframes_mut()[kf_idx];
    kf.bow = vocab.as_ref().map(|v| v.bow_vector(&features));
    kf.features = Some(features);
}

/// Local-graph optimization with the keyframe held fixed; optimized frame
/// poses are written back into the local graph.
fn optimize_local(local: &mut LocalPoseGraph, solver: &SolverConfig) -> Result<()> {
    if local.frames.is_empty() {
        return Ok(());
    }
    let mut g = PoseGraph::new();
    g.add_node(PoseGraphNode {
        id: local.keyframe_id,
        pose: local.keyframe_pose.clone(),
        is_keyframe: true,
        fixed: true,
    })?;
    for f in &local.frames {
        g.add_node(PoseGraphNode {
            id: f.id,
            pose: f.pose.clone(),
            is_keyframe: false,
            fixed: false,
        })?;
    }
    for e in &local.edges {
        g.add_edge(e.clone())?;
    }
    g.optimize(
        OptimizeScope::Local,
        solver.local_max_iterations,
        solver.term_tolerance,
    )?;
    for f in &mut local.frames {
        f.pose = g.node(f.id).expect("node exists").pose.clone();
    }
    Ok(())
}

fn process_local_graph(
    mut local: LocalPoseGraph,
    tracker: &mut Tracker,
    backend: &mut Backend,
    cfg: &RunConfig,
    intr: &CameraIntrinsics,
) -> Result<()> {
    optimize_local(&mut local, &cfg.solver)?;

    // The first merged keyframe anchors the gauge permanently.
    let first_merge = backend.graph.nodes().is_empty();
    backend.graph.merge_local_graph(&local)?;
    if first_merge {
        backend
            .graph
            .node_mut(local.keyframe_id)
            .expect("keyframe node exists")
            .fixed = true;
    }
    if cfg.run.mode != Mode::Slam {
        return Ok(());
    }

    ensure_vocabulary(tracker, backend, cfg);
    let accepted = detect_and_close_loops(&local, tracker, backend, cfg, intr)?;

    if accepted > 0 {
        backend
            .graph
            .robustify_edges_of_keyframe(local.keyframe_id, cfg.robust_kernel);
        backend.graph.optimize(
            OptimizeScope::KeyframesOnly,
            cfg.solver.keyframe_max_iterations,
            cfg.solver.term_tolerance,
        )?;
        propagate_frames(&mut backend.graph);
        sync_tracker_poses(tracker, &backend.graph);
    }
    Ok(())
}

/// Trains the online vocabulary once enough keyframes carry features, then
/// (re)computes bag-of-words vectors for every keyframe that lacks one.
fn ensure_vocabulary(tracker: &mut Tracker, backend: &mut Backend, cfg: &RunConfig) {
    if backend.vocab.is_none() && !backend.vocab_is_final {
        let images: Vec<Vec<crate::features::Descriptor>> = tracker
            .keyframes()
            .iter()
            .filter_map(|kf| kf.features.as_ref())
            .filter(|f| !f.is_empty())
            .map(|f| f.descriptors.clone())
            .collect();
        if images.len() >= VOCAB_TRAIN_KEYFRAMES {
            match Vocabulary::train(&images, 10, 3, cfg.run.seed) {
                Ok(v) => {
                    backend.vocab = Some(v);
                    backend.vocab_is_final = true;
                }
                Err(e) => log::warn!("vocabulary training failed: {e}"),
            }
        }
    }
    if let Some(vocab) = &backend.vocab {
        for kf in tracker.keyframes_mut() {
            if kf.bow.is_none() {
                if let Some(features) = &kf.features {
                    kf.bow = Some(vocab.bow_vector(features));
                }
            }
        }
    }
}

/// Loop-closure detection for the keyframe whose local graph just merged.
/// Returns the number of accepted closures.
fn detect_and_close_loops(
    local: &LocalPoseGraph,
    tracker: &mut Tracker,
    backend: &mut Backend,
    cfg: &RunConfig,
    intr: &CameraIntrinsics,
) -> Result<usize> {
    let keyframes = tracker.keyframes();
    let Some(current) = keyframes
        .iter()
        .position(|kf| kf.frame_index == local.keyframe_id)
    else {
        return Ok(0);
    };
    let bows: Vec<_> = keyframes.iter().map(|kf| kf.bow.clone()).collect();
    if bows[..=current].iter().any(|b| b.is_none()) {
        return Ok(0);
    }
    let bows: Vec<_> = bows[..=current]
        .iter()
        .map(|b| b.clone().unwrap())
        .collect();
    let candidates = detect_candidates(&bows, current, cfg.loop_closure.eta_thres);

    let mut accepted = 0usize;
    for cand in candidates {
        let (Some(fi), Some(fj)) = (&keyframes[cand].features, &keyframes[current].features)
        else {
            continue;
        };
        // Per-pair seed keeps RANSAC deterministic and independent of
        // detection order.
        let seed = cfg
            .run
            .seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add((cand as u64) << 32 | current as u64);
        let Some((h_svd, inliers)) = match_and_ransac(fi, fj, intr, &cfg.loop_closure, seed)
        else {
            continue;
        };
        let h_odom = keyframes[cand]
            .global_pose
            .inverse()
            .compose(&keyframes[current].global_pose);
        let closure = validate_and_refine(
            &keyframes[cand].cloud,
            &keyframes[current].cloud,
            &h_svd,
            &h_odom,
            &cfg.registration,
            keyframes[cand].frame_index,
            keyframes[current].frame_index,
            inliers.len(),
        )?;
        if let Some(closure) = closure {
            let mut edge = PoseGraphEdge::new(
                closure.i,
                closure.j,
                closure.pose.clone(),
                EdgeKind::LoopClosure,
            );
            edge.robust = Some(cfg.robust_kernel);
            backend.graph.add_edge(edge)?;
            backend.loop_closures.push(closure);
            accepted += 1;
        }
    }
    Ok(accepted)
}

/// Recomputes ordinary frame poses from their keyframe edge after a
/// keyframe-scope optimization.
fn propagate_frames(graph: &mut PoseGraph) {
    let updates: Vec<(usize, Pose)> = graph
        .edges()
        .iter()
        .filter(|e| e.kind == EdgeKind::OdometryKeyframe)
        .filter_map(|e| {
            let kf = graph.node(e.from)?;
            let frame = graph.node(e.to)?;
            if frame.is_keyframe {
                return None;
            }
            Some((e.to, kf.pose.compose(&e.measurement)))
        })
        .collect();
    for (id, pose) in updates {
        if let Some(node) = graph.node_mut(id) {
            node.pose = pose;
        }
    }
}

/// Pulls optimized keyframe poses back into the tracker so subsequent
/// tracking composes against corrected global poses.
fn sync_tracker_poses(tracker: &mut Tracker, graph: &PoseGraph) {
    tracker.update_global_poses(|id| graph.node(id).map(|n| n.pose.clone()));
}

fn write_outputs(
    cfg: &RunConfig,
    out_dir: &Path,
    trajectory: &[(usize, f64, Pose)],
    tracker: &Tracker,
    backend: &Backend,
) -> Result<()> {
    let traj_path = out_dir.join("trajectory.txt");
    let mut out = String::new();
    for (_, ts, pose) in trajectory {
        out.push_str(&format_tum_line(*ts, pose));
        out.push('\n');
    }
    std::fs::write(&traj_path, out).map_err(|e| Error::io(&traj_path, e))?;

    let kf_path = out_dir.join("keyframes.txt");
    let mut out = String::new();
    for kf in tracker.keyframes() {
        let pose = backend
            .graph
            .node(kf.frame_index)
            .map(|n| n.pose.clone())
            .unwrap_or_else(|| kf.global_pose.clone());
        let ts = trajectory
            .iter()
            .find(|(id, _, _)| *id == kf.frame_index)
            .map(|(_, ts, _)| *ts)
            .unwrap_or(kf.frame_index as f64);
        out.push_str(&format_tum_line(ts, &pose));
        out.push('\n');
    }
    std::fs::write(&kf_path, out).map_err(|e| Error::io(&kf_path, e))?;

    let g2o_path = out_dir.join("graph.g2o");
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(&g2o_path).map_err(|e| Error::io(&g2o_path, e))?,
    );
    write_g2o(&backend.graph, &mut file).map_err(|e| Error::io(&g2o_path, e))?;

    if cfg.run.mode == Mode::Slam {
        let csv_path = out_dir.join("loopclosures.csv");
        let mut out = String::from("from_frame,to_frame,inliers,alpha,inner_product\n");
        for lc in &backend.loop_closures {
            out.push_str(&format!(
                "{},{},{},{:.9e},{:.9e}\n",
                lc.i, lc.j, lc.inliers, lc.alpha, lc.inner_product
            ));
        }
        std::fs::write(&csv_path, out).map_err(|e| Error::io(&csv_path, e))?;
    }
    Ok(())
}

fn summarize(
    cfg: &RunConfig,
    trajectory: &[(usize, f64, Pose)],
    tracker: &Tracker,
    backend: &Backend,
    gt_entries: &[(f64, Pose)],
    skipped_frames: usize,
) -> Result<RunSummary> {
    let mut ate = None;
    let mut rpe_t = None;
    let mut rpe_r = None;
    if gt_entries.len() >= 3 && trajectory.len() >= 3 {
        let est = TrajectoryEstimate::new(
            trajectory.iter().map(|(_, ts, p)| (*ts, p.clone())).collect(),
        )?;
        let gt = TrajectoryEstimate::new(gt_entries.to_vec())?;
        match ate_rmse(&est, &gt) {
            Ok(v) => ate = Some(v),
            Err(e) => log::warn!("ATE unavailable: {e}"),
        }
        match rpe_rmse(&est, &gt, 1.0) {
            Ok((t, r)) => {
                rpe_t = Some(t);
                rpe_r = Some(r);
            }
            Err(e) => log::warn!("RPE unavailable: {e}"),
        }
    }
    Ok(RunSummary {
        frames: trajectory.len(),
        keyframes: tracker.keyframes().len(),
        loop_closures: if cfg.run.mode == Mode::Slam {
            backend.loop_closures.len()
        } else {
            0
        },
        skipped_frames,
        ate_rmse_m: ate,
        rpe_translational_m_per_s: rpe_t,
        rpe_rotational_deg_per_s: rpe_r,
    })
}
