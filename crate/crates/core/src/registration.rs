//! Kernelized point-cloud registration.
//!
//! A colored point cloud is viewed as a function in a reproducing-kernel
//! Hilbert space: a sum of squared-exponential kernels centered at its points,
//! weighted by appearance labels. Registration maximizes the inner product of
//! the fixed cloud's function with the moving cloud's function transformed by
//! a candidate pose, via gradient ascent on SE(3) with backtracking line
//! search and coarse-to-fine length-scale annealing.

use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::se3::{self, Pose, Twist};
use nalgebra::Vector3;

/// Number of appearance channels: R, G, B, |gx|, |gy|.
pub const LABEL_DIM: usize = 5;

pub type Label = [f64; LABEL_DIM];

/// 3D points with appearance label vectors.
#[derive(Debug, Clone)]
pub struct ColoredPointCloud {
    points: Vec<Vector3<f64>>,
    labels: Vec<Label>,
    timestamp: f64,
}

impl ColoredPointCloud {
    pub fn new(points: Vec<Vector3<f64>>, labels: Vec<Label>, timestamp: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("empty point cloud".into()));
        }
        if points.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "points/labels length mismatch: {} vs {}",
                points.len(),
                labels.len()
            )));
        }
        for p in &points {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidArgument("non-finite point coordinate".into()));
            }
        }
        for l in &labels {
            if !l.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c)) {
                return Err(Error::InvalidArgument(
                    "label channel outside [0, 1]".into(),
                ));
            }
        }
        Ok(ColoredPointCloud {
            points,
            labels,
            timestamp,
        })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies a rigid transform to every point, keeping labels.
    pub fn transformed(&self, pose: &Pose) -> ColoredPointCloud {
        ColoredPointCloud {
            points: self.points.iter().map(|p| pose.transform(p)).collect(),
            labels: self.labels.clone(),
            timestamp: self.timestamp,
        }
    }
}

/// Kernel and solver parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    /// Spatial kernel signal std-dev (sigma).
    pub sigma: f64,
    /// Spatial kernel initial length-scale, meters.
    pub ell_init: f64,
    /// Color kernel signal std-dev.
    pub sigma_c: f64,
    /// Color kernel length-scale.
    pub ell_c: f64,
    /// Pairs whose normalized spatial kernel falls below this are pruned.
    pub sparsification_threshold: f64,
    pub max_iterations: usize,
    /// Twist-step norm below which the solver declares convergence.
    pub step_tolerance: f64,
    /// Annealing floor for the spatial length-scale.
    pub ell_min: f64,
    /// Multiplicative decay applied when steps become small.
    pub ell_decay: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            sigma: 0.1,
            ell_init: 0.1,
            sigma_c: 1.0,
            ell_c: 0.1,
            sparsification_threshold: 8.315e-3,
            max_iterations: 2000,
            step_tolerance: 1e-5,
            ell_min: 0.02,
            ell_decay: 0.9,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma", self.sigma),
            ("ell_init", self.ell_init),
            ("sigma_c", self.sigma_c),
            ("ell_c", self.ell_c),
            ("sparsification_threshold", self.sparsification_threshold),
            ("step_tolerance", self.step_tolerance),
            ("ell_min", self.ell_min),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.ell_min > self.ell_init {
            return Err(Error::Config("ell_min must be <= ell_init".into()));
        }
        if !(self.ell_decay > 0.0 && self.ell_decay < 1.0) {
            return Err(Error::Config("ell_decay must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Pruning radius for a given length-scale. The normalized spatial kernel
    /// falls to the threshold at ell*sqrt(-2 ln thr); the 1.5 factor keeps the
    /// discarded tail mass well under 1% of the full double sum.
    pub fn prune_radius(&self, ell: f64) -> f64 {
        1.5 * ell * (-2.0 * self.sparsification_threshold.ln()).sqrt()
    }
}

/// Outcome of `register`.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub pose: Pose,
    /// Inner product at the returned pose, evaluated at `ell_init`.
    pub final_inner_product: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Accepted (length-scale, objective) pairs, one per iteration.
    pub trace: Vec<(f64, f64)>,
}

/// Squared-exponential spatial kernel.
pub fn geometric_kernel(x: &Vector3<f64>, z: &Vector3<f64>, sigma: f64, ell: f64) -> f64 {
    sigma * sigma * (-(x - z).norm_squared() / (2.0 * ell * ell)).exp()
}

/// Squared-exponential kernel over appearance labels.
pub fn appearance_kernel(la: &Label, lb: &Label, sigma_c: f64, ell_c: f64) -> f64 {
    let mut d2 = 0.0;
    for k in 0..LABEL_DIM {
        let d = la[k] - lb[k];
        d2 += d * d;
    }
    sigma_c * sigma_c * (-d2 / (2.0 * ell_c * ell_c)).exp()
}

/// Partial sums of one objective/gradient evaluation.
#[derive(Debug, Clone, Copy, Default)]
struct Accum {
    f: f64,
    grad_v: Vector3<f64>,
    grad_omega: Vector3<f64>,
    weight: f64,
    inertia: f64,
}

impl Accum {
    fn add(&mut self, other: &Accum) {
        self.f += other.f;
        self.grad_v += other.grad_v;
        self.grad_omega += other.grad_omega;
        self.weight += other.weight;
        self.inertia += other.inertia;
    }
}

struct EvalContext<'a> {
    fixed: &'a ColoredPointCloud,
    tree: &'a KdTree,
    moving: &'a ColoredPointCloud,
    cfg: &'a RegistrationConfig,
}

/// Moving points handled per parallel work unit. Partial sums are combined in
/// fixed chunk order so results are bit-stable across thread counts.
const CHUNK: usize = 64;

fn eval_chunk(ctx: &EvalContext, pose: &Pose, range: std::ops::Range<usize>, ell: f64) -> Accum {
    let mut acc = Accum::default();
    let mut neighbors: Vec<u32> = Vec::new();
    let radius = ctx.cfg.prune_radius(ell);
    let sigma2 = ctx.cfg.sigma * ctx.cfg.sigma;
    let inv_ell2 = 1.0 / (ell * ell);
    for j in range {
        let p = pose.transform(&ctx.moving.points[j]);
        ctx.tree.radius_indices(&p, radius, &mut neighbors);
        if neighbors.is_empty() {
            continue;
        }
        let lb = &ctx.moving.labels[j];
        for &i in &neighbors {
            let i = i as usize;
            let x = &ctx.fixed.points[i];
            let r = x - p;
            let k = sigma2 * (-r.norm_squared() * 0.5 * inv_ell2).exp();
            let c = appearance_kernel(&ctx.fixed.labels[i], lb, ctx.cfg.sigma_c, ctx.cfg.ell_c);
            let ck = c * k;
            let w = ck * inv_ell2;
            acc.f += ck;
            acc.grad_v += r * w;
            acc.grad_omega += p.cross(&r) * w;
            acc.weight += w;
            acc.inertia += w * p.norm_squared();
        }
    }
    acc
}

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n)
        .step_by(CHUNK)
        .map(|start| start..(start + CHUNK).min(n))
        .collect()
}

#[cfg(feature = "parallel")]
fn evaluate(ctx: &EvalContext, pose: &Pose, ell: f64) -> Accum {
    use rayon::prelude::*;
    let partials: Vec<Accum> = chunk_ranges(ctx.moving.len())
        .into_par_iter()
        .map(|range| eval_chunk(ctx, pose, range, ell))
        .collect();
    let mut total = Accum::default();
    for p in &partials {
        total.add(p);
    }
    total
}

#[cfg(not(feature = "parallel"))]
fn evaluate(ctx: &EvalContext, pose: &Pose, ell: f64) -> Accum {
    evaluate_serial_impl(ctx, pose, ell)
}

fn evaluate_serial_impl(ctx: &EvalContext, pose: &Pose, ell: f64) -> Accum {
    let mut total = Accum::default();
    for range in chunk_ranges(ctx.moving.len()) {
        let partial = eval_chunk(ctx, pose, range, ell);
        total.add(&partial);
    }
    total
}

/// Inner product of the two cloud functions with `b` transformed by `h`,
/// with kernel sparsification per the configured threshold.
pub fn inner_product(
    a: &ColoredPointCloud,
    b: &ColoredPointCloud,
    h: &Pose,
    cfg: &RegistrationConfig,
) -> f64 {
    let tree = KdTree::build(a.points());
    inner_product_with_tree(a, &tree, b, h, cfg, cfg.ell_init)
}

fn inner_product_with_tree(
    a: &ColoredPointCloud,
    tree: &KdTree,
    b: &ColoredPointCloud,
    h: &Pose,
    cfg: &RegistrationConfig,
    ell: f64,
) -> f64 {
    let ctx = EvalContext {
        fixed: a,
        tree,
        moving: b,
        cfg,
    };
    evaluate(&ctx, h, ell).f
}

/// Unpruned O(N^2) double sum; the independent reference for sparsification.
pub fn inner_product_dense(
    a: &ColoredPointCloud,
    b: &ColoredPointCloud,
    h: &Pose,
    cfg: &RegistrationConfig,
) -> f64 {
    let mut sum = 0.0;
    for (zj, lb) in b.points().iter().zip(b.labels()) {
        let p = h.transform(zj);
        for (xi, la) in a.points().iter().zip(a.labels()) {
            sum += appearance_kernel(la, lb, cfg.sigma_c, cfg.ell_c)
                * geometric_kernel(xi, &p, cfg.sigma, cfg.ell_init);
        }
    }
    sum
}

/// Gradient of the inner product with respect to a left-multiplicative twist
/// perturbation of `h`: F(exp(eps * xi) o h). Translational part is the
/// weighted residual sum, rotational part the weighted torque sum.
pub fn objective_gradient(
    fixed: &ColoredPointCloud,
    moving: &ColoredPointCloud,
    h: &Pose,
    cfg: &RegistrationConfig,
) -> Twist {
    let tree = KdTree::build(fixed.points());
    let ctx = EvalContext {
        fixed,
        tree: &tree,
        moving,
        cfg,
    };
    let acc = evaluate(&ctx, h, cfg.ell_init);
    Twist::new(acc.grad_omega, acc.grad_v)
}

/// Maximizes the kernelized inner product over SE(3) starting from `h0`.
pub fn register(
    fixed: &ColoredPointCloud,
    moving: &ColoredPointCloud,
    h0: &Pose,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    if fixed.is_empty() || moving.is_empty() {
        return Err(Error::InvalidArgument("register: empty cloud".into()));
    }
    cfg.validate()?;
    let tree = KdTree::build(fixed.points());
    let ctx = EvalContext {
        fixed,
        tree: &tree,
        moving,
        cfg,
    };

    let mut h = *h0;
    let mut ell = cfg.ell_init;
    let mut iterations = 0;
    let mut converged = false;
    let mut trace = Vec::new();

    while iterations < cfg.max_iterations {
        let acc = evaluate(&ctx, &h, ell);
        iterations += 1;
        trace.push((ell, acc.f));
        if acc.weight <= 0.0 {
            // No overlapping pairs at this length-scale; nothing to ascend.
            break;
        }
        // Precondition: translational part becomes a weighted mean residual,
        // rotational part a torque over an inertia-like normalizer.
        let inertia = if acc.inertia > 0.0 {
            acc.inertia
        } else {
            acc.weight
        };
        let step_dir = Twist::new(acc.grad_omega / inertia, acc.grad_v / acc.weight);
        let dir_norm = step_dir.norm();
        if dir_norm < cfg.step_tolerance {
            converged = true;
            break;
        }
        // Backtracking line search: halve from 1 until the objective increases.
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..=20 {
            let candidate = se3::exp(&step_dir.scaled(lambda)).compose(&h);
            let f = evaluate(&ctx, &candidate, ell).f;
            if f > acc.f {
                accepted = Some((candidate, lambda));
                break;
            }
            lambda *= 0.5;
        }
        let Some((next, lambda)) = accepted else {
            break;
        };
        h = next;
        let step_norm = lambda * dir_norm;
        if step_norm < cfg.step_tolerance {
            converged = true;
            break;
        }
        if step_norm < 10.0 * cfg.step_tolerance && ell > cfg.ell_min {
            ell = (ell * cfg.ell_decay).max(cfg.ell_min);
        }
    }

    let final_inner_product = inner_product_with_tree(fixed, &tree, moving, &h, cfg, cfg.ell_init);
    Ok(RegistrationResult {
        pose: h,
        final_inner_product,
        iterations,
        converged,
        trace,
    })
}

/// Serial evaluation entry points kept public for the benchmark suite.
#[doc(hidden)]
pub mod bench_internals {
    use super::*;

    pub fn inner_product_serial(
        a: &ColoredPointCloud,
        b: &ColoredPointCloud,
        h: &Pose,
        cfg: &RegistrationConfig,
    ) -> f64 {
        let tree = KdTree::build(a.points());
        let ctx = EvalContext {
            fixed: a,
            tree: &tree,
            moving: b,
            cfg,
        };
        evaluate_serial_impl(&ctx, h, cfg.ell_init).f
    }

    pub fn inner_product_dispatch(
        a: &ColoredPointCloud,
        b: &ColoredPointCloud,
        h: &Pose,
        cfg: &RegistrationConfig,
    ) -> f64 {
        super::inner_product(a, b, h, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_cloud(rng: &mut StdRng, n: usize, extent: f64) -> ColoredPointCloud {
        let points = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(0.0..extent),
                    rng.gen_range(0.0..extent),
                    rng.gen_range(0.1..extent + 0.1),
                )
            })
            .collect();
        let labels = (0..n)
            .map(|_| {
                let mut l = [0.0; LABEL_DIM];
                for c in l.iter_mut() {
                    *c = rng.gen_range(0.0..1.0);
                }
                l
            })
            .collect();
        ColoredPointCloud::new(points, labels, 0.0).unwrap()
    }

    #[test]
    fn geometric_kernel_values() {
        let x = Vector3::zeros();
        assert_abs_diff_eq!(geometric_kernel(&x, &x, 0.1, 0.1), 0.01, epsilon = 1e-15);
        let z = Vector3::new(0.1, 0.0, 0.0);
        assert_abs_diff_eq!(
            geometric_kernel(&x, &z, 0.1, 0.1),
            0.01 * (-0.5f64).exp(),
            epsilon = 1e-12
        );
        // 6.0653e-3 per direct evaluation
        assert_abs_diff_eq!(geometric_kernel(&x, &z, 0.1, 0.1), 6.0653e-3, epsilon = 1e-7);
        let far = Vector3::new(2.0, 0.0, 0.0);
        assert!(geometric_kernel(&x, &far, 0.1, 0.1) < 8.315e-3);
    }

    #[test]
    fn appearance_kernel_values() {
        let la = [1.0, 0.0, 0.0, 0.0, 0.0];
        let lb = [0.0, 1.0, 0.0, 0.0, 0.0];
        assert_abs_diff_eq!(appearance_kernel(&la, &la, 1.0, 0.1), 1.0, epsilon = 1e-15);
        let v = appearance_kernel(&la, &lb, 1.0, 0.1);
        assert!(v < 1e-40, "orthogonal colors should decouple, got {v}");
        assert_eq!(v, appearance_kernel(&lb, &la, 1.0, 0.1));
    }

    #[test]
    fn inner_product_single_pair() {
        let cfg = RegistrationConfig::default();
        let label = [0.5, 0.5, 0.5, 0.0, 0.0];
        let a = ColoredPointCloud::new(vec![Vector3::new(0.0, 0.0, 1.0)], vec![label], 0.0).unwrap();
        let b = a.clone();
        let v = inner_product(&a, &b, &Pose::identity(), &cfg);
        assert_abs_diff_eq!(v, 0.01, epsilon = 1e-12);
    }

    #[test]
    fn inner_product_diagonal_lower_bound() {
        let mut rng = StdRng::seed_from_u64(1);
        let cfg = RegistrationConfig::default();
        let a = random_cloud(&mut rng, 100, 1.0);
        let v = inner_product(&a, &a, &Pose::identity(), &cfg);
        let diag = a.len() as f64 * cfg.sigma * cfg.sigma * cfg.sigma_c * cfg.sigma_c;
        assert!(v >= diag - 1e-9, "{v} < {diag}");
    }

    #[test]
    fn inner_product_matches_dense_within_one_percent() {
        let mut rng = StdRng::seed_from_u64(2);
        let cfg = RegistrationConfig::default();
        let a = random_cloud(&mut rng, 200, 1.0);
        let b = random_cloud(&mut rng, 200, 1.0);
        let sparse = inner_product(&a, &b, &Pose::identity(), &cfg);
        let dense = inner_product_dense(&a, &b, &Pose::identity(), &cfg);
        assert!(
            (sparse - dense).abs() <= 0.01 * dense,
            "sparse {sparse} dense {dense}"
        );
    }

    #[test]
    fn inner_product_symmetry_at_identity() {
        let mut rng = StdRng::seed_from_u64(3);
        let cfg = RegistrationConfig::default();
        let a = random_cloud(&mut rng, 80, 0.5);
        let b = random_cloud(&mut rng, 90, 0.5);
        let ab = inner_product(&a, &b, &Pose::identity(), &cfg);
        let ba = inner_product(&b, &a, &Pose::identity(), &cfg);
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-12);
    }

    #[test]
    fn inner_product_rigid_invariance() {
        let mut rng = StdRng::seed_from_u64(4);
        let cfg = RegistrationConfig::default();
        let a = random_cloud(&mut rng, 60, 0.5);
        let b = random_cloud(&mut rng, 60, 0.5);
        let g = se3::exp(&Twist::new(
            Vector3::new(0.2, -0.1, 0.3),
            Vector3::new(1.0, 2.0, -0.5),
        ));
        let before = inner_product(&a, &b, &Pose::identity(), &cfg);
        let after = inner_product(&a.transformed(&g), &b.transformed(&g), &Pose::identity(), &cfg);
        assert_abs_diff_eq!(before, after, epsilon = 1e-9);
    }

    #[test]
    fn serial_and_default_paths_agree_bitwise() {
        let mut rng = StdRng::seed_from_u64(6);
        let cfg = RegistrationConfig::default();
        let a = random_cloud(&mut rng, 150, 0.8);
        let b = random_cloud(&mut rng, 150, 0.8);
        let v1 = inner_product(&a, &b, &Pose::identity(), &cfg);
        let v2 = bench_internals::inner_product_serial(&a, &b, &Pose::identity(), &cfg);
        assert_eq!(v1.to_bits(), v2.to_bits());
    }

    fn finite_difference_gradient(
        fixed: &ColoredPointCloud,
        moving: &ColoredPointCloud,
        h: &Pose,
        cfg: &RegistrationConfig,
        step: f64,
    ) -> Twist {
        let mut g = [0.0; 6];
        for k in 0..6 {
            let mut e = nalgebra::Vector6::zeros();
            e[k] = step;
            let hp = se3::exp(&Twist::from_vector(&e)).compose(h);
            e[k] = -step;
            let hm = se3::exp(&Twist::from_vector(&e)).compose(h);
            let fp = inner_product_dense(fixed, moving, &hp, cfg);
            let fm = inner_product_dense(fixed, moving, &hm, cfg);
            g[k] = (fp - fm) / (2.0 * step);
        }
        Twist::new(
            Vector3::new(g[0], g[1], g[2]),
            Vector3::new(g[3], g[4], g[5]),
        )
    }

    #[test]
    fn gradient_zero_at_self_registration() {
        let mut rng = StdRng::seed_from_u64(8);
        let a = random_cloud(&mut rng, 50, 0.4);
        let cfg = RegistrationConfig::default();
        let g = objective_gradient(&a, &a, &Pose::identity(), &cfg);
        assert!(g.norm() < 1e-8, "gradient norm {}", g.norm());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(9);
        // Dense config (no pruning) so the finite-difference oracle sees the
        // same smooth objective as the analytic gradient.
        let mut cfg = RegistrationConfig::default();
        cfg.sparsification_threshold = 1e-300;
        for trial in 0..5 {
            let a = random_cloud(&mut rng, 60, 0.5);
            let b = random_cloud(&mut rng, 60, 0.5);
            let h = se3::exp(&Twist::new(
                Vector3::new(
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                ),
                Vector3::new(
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                ),
            ));
            let analytic = objective_gradient(&a, &b, &h, &cfg);
            let numeric = finite_difference_gradient(&a, &b, &h, &cfg, 1e-6);
            let scale = numeric.norm().max(1e-12);
            let err = (analytic.to_vector() - numeric.to_vector()).norm() / scale;
            assert!(err < 1e-5, "trial {trial}: relative error {err}");
        }
    }

    #[test]
    fn gradient_single_pair_pulls_toward_fixed() {
        let cfg = RegistrationConfig::default();
        let label = [0.2, 0.4, 0.6, 0.0, 0.0];
        let d = 0.03;
        let fixed =
            ColoredPointCloud::new(vec![Vector3::new(d, 0.0, 1.0)], vec![label], 0.0).unwrap();
        let moving =
            ColoredPointCloud::new(vec![Vector3::new(0.0, 0.0, 1.0)], vec![label], 0.0).unwrap();
        let g = objective_gradient(&fixed, &moving, &Pose::identity(), &cfg);
        assert!(g.v[0] > 0.0);
        assert!(g.v[1].abs() < 1e-15 && g.v[2].abs() < 1e-15);
    }

    #[test]
    fn register_self_is_stationary() {
        let mut rng = StdRng::seed_from_u64(10);
        let a = random_cloud(&mut rng, 120, 0.6);
        let cfg = RegistrationConfig::default();
        let res = register(&a, &a, &Pose::identity(), &cfg).unwrap();
        assert!(res.converged);
        assert!(res.pose.translation().norm() < 0.005);
        assert!(res.pose.rotation_angle() < 0.5f64.to_radians());
    }

    #[test]
    fn register_recovers_synthetic_transform() {
        let mut rng = StdRng::seed_from_u64(11);
        let cfg = RegistrationConfig::default();
        let fixed = random_cloud(&mut rng, 300, 0.8);
        let truth = se3::exp(&Twist::new(
            Vector3::new(0.0, 5f64.to_radians(), 0.0),
            Vector3::new(0.05, -0.02, 0.01),
        ));
        let moving = fixed.transformed(&truth.inverse());
        let res = register(&fixed, &moving, &Pose::identity(), &cfg).unwrap();
        let err = truth.inverse().compose(&res.pose);
        assert!(
            err.rotation_angle() < 0.5f64.to_radians(),
            "rotation error {}",
            err.rotation_angle().to_degrees()
        );
        assert!(
            err.translation().norm() < 0.005,
            "translation error {}",
            err.translation().norm()
        );
    }

    #[test]
    fn register_at_ground_truth_converges_immediately() {
        let mut rng = StdRng::seed_from_u64(12);
        let cfg = RegistrationConfig::default();
        let fixed = random_cloud(&mut rng, 100, 0.6);
        let truth = se3::exp(&Twist::new(
            Vector3::new(0.02, 0.0, 0.03),
            Vector3::new(0.01, 0.02, 0.0),
        ));
        let moving = fixed.transformed(&truth.inverse());
        let res = register(&fixed, &moving, &truth, &cfg).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
    }

    #[test]
    fn register_monotone_ascent_per_length_scale() {
        let mut rng = StdRng::seed_from_u64(13);
        let cfg = RegistrationConfig::default();
        let fixed = random_cloud(&mut rng, 200, 0.8);
        let truth = se3::exp(&Twist::new(
            Vector3::new(0.0, 0.0, 0.08),
            Vector3::new(0.04, 0.0, -0.02),
        ));
        let moving = fixed.transformed(&truth.inverse());
        let res = register(&fixed, &moving, &Pose::identity(), &cfg).unwrap();
        for pair in res.trace.windows(2) {
            let (ell0, f0) = pair[0];
            let (ell1, f1) = pair[1];
            if ell0 == ell1 {
                assert!(f1 >= f0, "objective decreased: {f0} -> {f1} at ell {ell0}");
            }
        }
    }

    #[test]
    fn register_rejects_empty_cloud() {
        assert!(ColoredPointCloud::new(vec![], vec![], 0.0).is_err());
        // Mismatched lengths are also rejected at construction.
        let r = ColoredPointCloud::new(vec![Vector3::zeros()], vec![], 0.0);
        assert!(r.is_err());
    }

    #[test]
    fn pruned_pairs_are_below_threshold() {
        let mut rng = StdRng::seed_from_u64(14);
        let cfg = RegistrationConfig::default();
        let a = random_cloud(&mut rng, 100, 1.0);
        let b = random_cloud(&mut rng, 100, 1.0);
        let radius = cfg.prune_radius(cfg.ell_init);
        // Every pair beyond the prune radius has geometric kernel below the
        // threshold; total pruned mass is bounded accordingly.
        let mut pruned_mass = 0.0;
        for zj in b.points() {
            for xi in a.points() {
                if (xi - zj).norm() > radius {
                    let k = geometric_kernel(xi, zj, cfg.sigma, cfg.ell_init);
                    assert!(k < cfg.sparsification_threshold);
                    pruned_mass += k * cfg.sigma_c * cfg.sigma_c;
                }
            }
        }
        let bound = (a.len() * b.len()) as f64
            * cfg.sparsification_threshold
            * cfg.sigma_c
            * cfg.sigma_c;
        assert!(pruned_mass <= bound);
    }
}
