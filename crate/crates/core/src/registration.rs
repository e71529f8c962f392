//! Generalized ICP with the plane-to-plane covariance model.
//!
//! Per-point covariances come from the `neighbors_k` nearest neighbours and are
//! regularized to `V diag(eps, 1, 1) V^T`. Alignment minimizes
//! `sum d^T (C_B + R C_A R^T)^-1 d` by damped Gauss-Newton with a left
//! perturbation `T' = (exp(w), v) * T`.

use std::sync::Arc;

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::PriorResult;
use crate::geometry::{Pose, Rotation};
use crate::pointcloud::{PointCloud, SpatialIndex};

/// Number of step halvings tried before an iteration gives up.
pub const MAX_HALVINGS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("cloud has {got} points; covariance estimation needs at least {min}")]
    TooFewPoints { got: usize, min: usize },
    #[error("invalid registration setting: {0}")]
    InvalidConfig(String),
    #[error("covariance count {covariances} does not match point count {points}")]
    CovarianceMismatch { points: usize, covariances: usize },
}

/// The `registration` configuration section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GicpConfig {
    /// Iteration cap for scan-to-scan matching (and plain `gicp_align`).
    pub max_iterations: usize,
    /// Iteration cap for scan-to-submap refinement.
    pub submap_max_iterations: usize,
    pub correspondence_max_dist: f64,
    pub translation_epsilon: f64,
    pub rotation_epsilon: f64,
    pub neighbors_k: usize,
    pub workers: usize,
    pub covariance_floor: f64,
}

impl Default for GicpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            submap_max_iterations: 20,
            correspondence_max_dist: 1.0,
            translation_epsilon: 1e-4,
            rotation_epsilon: 1e-4,
            neighbors_k: 20,
            workers: 1,
            covariance_floor: 1e-3,
        }
    }
}

impl GicpConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        let bad = |m: &str| Err(RegistrationError::InvalidConfig(m.to_string()));
        if self.max_iterations < 1 || self.submap_max_iterations < 1 {
            return bad("max_iterations must be at least 1");
        }
        if self.neighbors_k < 3 {
            return bad("neighbors_k must be at least 3");
        }
        if self.workers < 1 {
            return bad("workers must be at least 1");
        }
        if !(self.correspondence_max_dist > 0.0) {
            return bad("correspondence_max_dist must be positive");
        }
        if !(self.translation_epsilon > 0.0 && self.rotation_epsilon > 0.0) {
            return bad("epsilons must be positive");
        }
        if !(self.covariance_floor > 0.0 && self.covariance_floor <= 1.0) {
            return bad("covariance_floor must be in (0, 1]");
        }
        Ok(())
    }
}

/// A cloud with per-point covariances and a spatial index over its points.
#[derive(Debug, Clone)]
pub struct EnrichedCloud {
    pub cloud: PointCloud,
    positions: Vec<Vector3<f64>>,
    covariances: Vec<Matrix3<f64>>,
    index: Option<SpatialIndex>,
}

impl EnrichedCloud {
    pub fn from_parts(cloud: PointCloud, covariances: Vec<Matrix3<f64>>) -> Result<Self, RegistrationError> {
        if cloud.len() != covariances.len() {
            return Err(RegistrationError::CovarianceMismatch {
                points: cloud.len(),
                covariances: covariances.len(),
            });
        }
        let positions = cloud.positions();
        let index = SpatialIndex::new(&positions);
        Ok(Self {
            cloud,
            positions,
            covariances,
            index,
        })
    }

    /// Every covariance set to the identity: GICP degenerates to
    /// point-to-point ICP.
    pub fn with_identity_covariances(cloud: PointCloud) -> Self {
        let n = cloud.len();
        Self::from_parts(cloud, vec![Matrix3::identity(); n]).expect("lengths match")
    }

    pub fn empty(stamp: f64, frame: &str) -> Self {
        Self::with_identity_covariances(PointCloud::new(stamp, frame, Vec::new()))
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn covariances(&self) -> &[Matrix3<f64>] {
        &self.covariances
    }

    pub fn index(&self) -> Option<&SpatialIndex> {
        self.index.as_ref()
    }
}

/// One Gauss-Newton iteration as recorded by [`gicp_align`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    /// Mean residual with this iteration's correspondences, before the step.
    pub before: f64,
    /// Mean residual with the same correspondences after the accepted step.
    pub after: f64,
    pub correspondences: usize,
    /// Scale applied to the Gauss-Newton step (1 unless halved); 0 if rejected.
    pub step_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub transform: Pose,
    pub converged: bool,
    pub iterations_used: usize,
    /// Mean Mahalanobis residual over the final correspondences.
    pub final_residual: f64,
    pub correspondence_fraction: f64,
    /// The alignment was not attempted (empty submap); `transform` is the seed.
    pub skipped: bool,
    pub history: Vec<IterationRecord>,
}

impl RegistrationResult {
    fn echo(guess: Pose) -> Self {
        Self {
            transform: guess,
            converged: false,
            iterations_used: 0,
            final_residual: 0.0,
            correspondence_fraction: 0.0,
            skipped: false,
            history: Vec::new(),
        }
    }
}

/// A frozen GICP cost: fixed correspondences and fixed Mahalanobis weights.
/// This is the quadratic model each Gauss-Newton iteration works on.
#[derive(Debug, Clone)]
pub struct GicpProblem {
    pub source: Vec<Vector3<f64>>,
    pub target: Vec<Vector3<f64>>,
    pub weights: Vec<Matrix3<f64>>,
}

impl GicpProblem {
    /// `sum (b - T a)^T M (b - T a)`.
    pub fn cost(&self, t: &Pose) -> f64 {
        let mut sum = 0.0;
        for ((a, b), m) in self.source.iter().zip(&self.target).zip(&self.weights) {
            let d = b - t.transform_point(a);
            sum += d.dot(&(m * d));
        }
        sum
    }

    /// Gauss-Newton normal equations `(H, g)` at `t`, with `g` half the cost
    /// gradient with respect to the left perturbation `(w, v)`.
    pub fn linearize(&self, t: &Pose) -> (Matrix6<f64>, Vector6<f64>) {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for ((a, b), m) in self.source.iter().zip(&self.target).zip(&self.weights) {
            let p = t.transform_point(a);
            accumulate(&mut h, &mut g, &p, &(b - p), m);
        }
        (h, g)
    }

    /// Analytic gradient of [`GicpProblem::cost`] with respect to `(w, v)`.
    pub fn gradient(&self, t: &Pose) -> Vector6<f64> {
        2.0 * self.linearize(t).1
    }
}

/// Applies the left perturbation `(w, v)` to `t`.
pub fn perturb(t: &Pose, delta: &Vector6<f64>) -> Pose {
    let w = Vector3::new(delta[0], delta[1], delta[2]);
    let v = Vector3::new(delta[3], delta[4], delta[5]);
    Pose::new(Rotation::from_scaled_axis(&w), v).compose(t)
}

fn skew(p: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -p.z, p.y, p.z, 0.0, -p.x, -p.y, p.x, 0.0)
}

// J = [ [p]x , -I ] is the Jacobian of d = b - p under the left perturbation.
fn accumulate(h: &mut Matrix6<f64>, g: &mut Vector6<f64>, p: &Vector3<f64>, d: &Vector3<f64>, m: &Matrix3<f64>) {
    let px = skew(p);
    let m_px = m * px;
    let hww = px.transpose() * m_px;
    let hwv = -px.transpose() * m;
    h.fixed_view_mut::<3, 3>(0, 0).add_assign(&hww);
    h.fixed_view_mut::<3, 3>(0, 3).add_assign(&hwv);
    h.fixed_view_mut::<3, 3>(3, 0).add_assign(&hwv.transpose());
    h.fixed_view_mut::<3, 3>(3, 3).add_assign(m);
    let md = m * d;
    let gw = px.transpose() * md;
    g.fixed_rows_mut::<3>(0).add_assign(&gw);
    g.fixed_rows_mut::<3>(3).add_assign(&(-md));
}

use std::ops::AddAssign;

/// Runs per-point work either inline or on a dedicated pool. Results are
/// collected in index order, so the worker count never changes the output.
#[derive(Clone)]
pub struct Workers {
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Workers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Workers({})", self.count())
    }
}

impl Workers {
    pub fn new(count: usize) -> Result<Self, RegistrationError> {
        if count < 1 {
            return Err(RegistrationError::InvalidConfig("workers must be at least 1".into()));
        }
        if count == 1 {
            return Ok(Self { pool: None });
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(count)
            .build()
            .map_err(|e| RegistrationError::InvalidConfig(format!("thread pool: {e}")))?;
        Ok(Self {
            pool: Some(Arc::new(pool)),
        })
    }

    pub fn serial() -> Self {
        Self { pool: None }
    }

    pub fn count(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    /// As [`map`](Self::map) over `0..order.len()`, evaluated in the sequence
    /// given by the permutation `order`; results are indexed as usual.
    pub fn map_permuted<T, F>(&self, order: &[u32], f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        let by_slot = self.map(order.len(), |s| f(order[s] as usize));
        let mut out: Vec<Option<T>> = std::iter::repeat_with(|| None).take(order.len()).collect();
        for (s, v) in by_slot.into_iter().enumerate() {
            out[order[s] as usize] = Some(v);
        }
        out.into_iter().map(|v| v.expect("order is a permutation")).collect()
    }

    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match &self.pool {
            None => (0..n).map(f).collect(),
            Some(pool) => pool.install(|| (0..n).into_par_iter().with_min_len(256).map(f).collect()),
        }
    }
}

/// Plane-to-plane covariance from the neighbourhood of one point:
/// `V diag(floor, 1, 1) V^T`, i.e. `I - (1 - floor) n n^T` with `n` the
/// eigenvector of the smallest eigenvalue.
fn regularized_covariance(neighbors: impl Iterator<Item = Vector3<f64>> + Clone, floor: f64) -> Matrix3<f64> {
    let mut n = 0.0;
    let mut mean = Vector3::zeros();
    for p in neighbors.clone() {
        mean += p;
        n += 1.0;
    }
    mean /= n;
    let mut cov = Matrix3::zeros();
    for p in neighbors {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let normal = smallest_eigenvector(&cov);
    Matrix3::identity() - (1.0 - floor) * normal * normal.transpose()
}

/// Unit eigenvector of the smallest eigenvalue of a symmetric 3x3 matrix.
/// Closed form when that eigenvalue is well separated; otherwise the
/// iterative solver, whose choice within a repeated eigenspace is stable.
fn smallest_eigenvector(a: &Matrix3<f64>) -> Vector3<f64> {
    let off = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
    let q = a.trace() / 3.0;
    let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * off;
    if off > 0.0 && p2 > 0.0 {
        let p = (p2 / 6.0).sqrt();
        let b = (a - Matrix3::from_diagonal_element(q)) / p;
        let phi = (b.determinant() / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
        let lo = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
        let mid = 3.0 * q - (q + 2.0 * p * phi.cos()) - lo;
        // Rows of (A - lo I) span the plane orthogonal to the eigenvector.
        if mid - lo > 1e-6 * p {
            let m = a - Matrix3::from_diagonal_element(lo);
            let (r0, r1, r2) = (m.row(0).transpose(), m.row(1).transpose(), m.row(2).transpose());
            let candidates = [r0.cross(&r1), r0.cross(&r2), r1.cross(&r2)];
            let best = candidates
                .iter()
                .max_by(|x, y| x.norm_squared().total_cmp(&y.norm_squared()))
                .expect("three candidates");
            let norm = best.norm();
            if norm > 1e-6 * p * p {
                return best / norm;
            }
        }
    }
    let eig = SymmetricEigen::new(*a);
    let i = (0..3)
        .min_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]).then(x.cmp(&y)))
        .expect("three eigenvalues");
    eig.eigenvectors.column(i).into_owned()
}

/// Stateful aligner holding the configuration and worker pool. One alignment
/// at a time per instance.
#[derive(Debug, Clone)]
pub struct Gicp {
    pub config: GicpConfig,
    workers: Workers,
}

impl Gicp {
    pub fn new(config: GicpConfig) -> Result<Self, RegistrationError> {
        config.validate()?;
        let workers = Workers::new(config.workers)?;
        Ok(Self { config, workers })
    }

    pub fn workers(&self) -> &Workers {
        &self.workers
    }

    /// Estimates per-point covariances from the `neighbors_k` nearest
    /// neighbours (the point itself included).
    pub fn enrich(&self, cloud: &PointCloud) -> Result<EnrichedCloud, RegistrationError> {
        let k = self.config.neighbors_k;
        if cloud.len() < k {
            return Err(RegistrationError::TooFewPoints {
                got: cloud.len(),
                min: k,
            });
        }
        let positions = cloud.positions();
        let index = SpatialIndex::new(&positions).expect("non-empty");
        let floor = self.config.covariance_floor;
        let covariances = self.workers.map_permuted(index.tree_order(), |i| {
            let mut nn = Vec::with_capacity(k);
            index.nearest_indices_into(&positions[i], k, &mut nn);
            regularized_covariance(nn.iter().map(|&j| positions[j]), floor)
        });
        Ok(EnrichedCloud {
            cloud: cloud.clone(),
            positions,
            covariances,
            index: Some(index),
        })
    }

    /// Nearest-neighbour correspondences of `source` under `t`, gated by
    /// `correspondence_max_dist`, as a frozen problem.
    pub fn correspond(&self, source: &EnrichedCloud, target: &EnrichedCloud, t: &Pose) -> GicpProblem {
        let Some(index) = target.index() else {
            return GicpProblem {
                source: Vec::new(),
                target: Vec::new(),
                weights: Vec::new(),
            };
        };
        let r = t.rotation.matrix();
        let max_d = self.config.correspondence_max_dist;
        let pair = |i: usize| {
            let a = source.positions[i];
            let p = t.transform_point(&a);
            index.nearest_within(&p, max_d).map(|(j, _)| {
                let c = target.covariances[j] + r * source.covariances[i] * r.transpose();
                let m = c.try_inverse().unwrap_or_else(Matrix3::zeros);
                (a, target.positions[j], m)
            })
        };
        let pairs = match source.index() {
            Some(own) => self.workers.map_permuted(own.tree_order(), pair),
            None => self.workers.map(source.len(), pair),
        };
        let mut problem = GicpProblem {
            source: Vec::with_capacity(pairs.len()),
            target: Vec::with_capacity(pairs.len()),
            weights: Vec::with_capacity(pairs.len()),
        };
        for (a, b, m) in pairs.into_iter().flatten() {
            problem.source.push(a);
            problem.target.push(b);
            problem.weights.push(m);
        }
        problem
    }

    /// Aligns `source` onto `target` starting from `guess`, with at most
    /// `max_iterations` Gauss-Newton iterations.
    pub fn align_with(
        &self,
        source: &EnrichedCloud,
        target: &EnrichedCloud,
        guess: &Pose,
        max_iterations: usize,
    ) -> RegistrationResult {
        let mut out = RegistrationResult::echo(*guess);
        if source.is_empty() {
            return out;
        }
        let mut t = *guess;
        let n = source.len() as f64;
        for _ in 0..max_iterations {
            let problem = self.correspond(source, target, &t);
            let m = problem.source.len();
            if m == 0 {
                out.converged = false;
                out.correspondence_fraction = 0.0;
                break;
            }
            out.iterations_used += 1;
            out.correspondence_fraction = m as f64 / n;
            let before = problem.cost(&t) / m as f64;
            let (h, g) = problem.linearize(&t);
            let Some(delta) = h.cholesky().map(|c| c.solve(&(-g))) else {
                out.final_residual = before;
                out.history.push(IterationRecord {
                    before,
                    after: before,
                    correspondences: m,
                    step_scale: 0.0,
                });
                break;
            };
            let small = Vector3::new(delta[0], delta[1], delta[2]).norm() < self.config.rotation_epsilon
                && Vector3::new(delta[3], delta[4], delta[5]).norm() < self.config.translation_epsilon;

            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let candidate = perturb(&t, &(delta * scale));
                let after = problem.cost(&candidate) / m as f64;
                if after <= before {
                    accepted = Some((candidate, after));
                    break;
                }
                scale *= 0.5;
            }
            match accepted {
                Some((candidate, after)) => {
                    t = candidate;
                    out.final_residual = after;
                    out.history.push(IterationRecord {
                        before,
                        after,
                        correspondences: m,
                        step_scale: scale,
                    });
                    if small {
                        out.converged = true;
                        break;
                    }
                }
                None => {
                    // No descent left within the halving budget: stationary.
                    out.final_residual = before;
                    out.history.push(IterationRecord {
                        before,
                        after: before,
                        correspondences: m,
                        step_scale: 0.0,
                    });
                    out.converged = true;
                    break;
                }
            }
        }
        out.transform = t;
        out
    }

    pub fn align(&self, source: &EnrichedCloud, target: &EnrichedCloud, guess: &Pose) -> RegistrationResult {
        self.align_with(source, target, guess, self.config.max_iterations)
    }

    /// Matches the current scan against the previous one, seeded with the
    /// prior (identity when the prior is degraded).
    pub fn scan_to_scan(&self, curr: &EnrichedCloud, prev: &EnrichedCloud, prior: &PriorResult) -> RegistrationResult {
        let guess = if prior.degraded_to_identity {
            Pose::identity()
        } else {
            prior.transform
        };
        self.align(curr, prev, &guess)
    }

    /// Refines `seed` against a world-frame submap. `anchor` is the previous
    /// pose `X_{k-1}`; the returned transform stays incremental so that
    /// `X_k = anchor * transform`.
    pub fn scan_to_submap(
        &self,
        curr: &EnrichedCloud,
        submap: &EnrichedCloud,
        anchor: &Pose,
        seed: &RegistrationResult,
    ) -> RegistrationResult {
        if submap.is_empty() {
            let mut out = seed.clone();
            out.skipped = true;
            return out;
        }
        let guess = anchor.compose(&seed.transform);
        let mut out = self.align_with(curr, submap, &guess, self.config.submap_max_iterations);
        out.transform = anchor.inverse().compose(&out.transform);
        out
    }
}

pub fn enrich(cloud: &PointCloud, cfg: &GicpConfig) -> Result<EnrichedCloud, RegistrationError> {
    Gicp::new(cfg.clone())?.enrich(cloud)
}

pub fn gicp_align(
    source: &EnrichedCloud,
    target: &EnrichedCloud,
    guess: &Pose,
    cfg: &GicpConfig,
) -> Result<RegistrationResult, RegistrationError> {
    Ok(Gicp::new(cfg.clone())?.align(source, target, guess))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::transform_cloud;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Points sampled on the inside of an axis-aligned box plus a pillar, so
    /// every degree of freedom is constrained.
    pub(crate) fn room(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (hx, hy, hz) = (4.0, 3.0, 1.5);
        let mut pts = Vec::with_capacity(n);
        while pts.len() < n {
            let u: f64 = rng.random_range(-1.0..1.0);
            let v: f64 = rng.random_range(-1.0..1.0);
            let p = match rng.random_range(0..8) {
                0 => Vector3::new(hx, u * hy, v * hz),
                1 => Vector3::new(-hx, u * hy, v * hz),
                2 => Vector3::new(u * hx, hy, v * hz),
                3 => Vector3::new(u * hx, -hy, v * hz),
                4 => Vector3::new(u * hx, v * hy, -hz),
                5 => Vector3::new(u * hx, v * hy, hz),
                6 => Vector3::new(1.5 + 0.3 * u, 1.0, v * hz),
                _ => Vector3::new(1.5, 1.0 + 0.3 * u, v * hz),
            };
            pts.push(p);
        }
        PointCloud::from_positions(0.0, "base", &pts)
    }

    fn cfg() -> GicpConfig {
        GicpConfig {
            max_iterations: 50,
            ..GicpConfig::default()
        }
    }

    #[test]
    fn planar_normals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<_> = (0..500)
            .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.0))
            .collect();
        let e = enrich(&PointCloud::from_positions(0.0, "base", &pts), &cfg()).unwrap();
        for c in e.covariances() {
            let eig = SymmetricEigen::new(*c);
            let i = eig.eigenvalues.imin();
            let v = eig.eigenvectors.column(i);
            assert!((v.z.abs() - 1.0).abs() < 1e-6);
            assert!((eig.eigenvalues[i] - 1e-3).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_line_is_spd() {
        let pts: Vec<_> = (0..50).map(|i| Vector3::new(i as f64 * 0.1, 0.0, 0.0)).collect();
        let e = enrich(&PointCloud::from_positions(0.0, "base", &pts), &cfg()).unwrap();
        for c in e.covariances() {
            assert!((c - c.transpose()).norm() < 1e-12);
            let eig = SymmetricEigen::new(*c);
            assert!(eig.eigenvalues.iter().all(|&l| (1e-3 - 1e-12..=1.0 + 1e-12).contains(&l)));
        }
    }

    #[test]
    fn too_few_points() {
        let c = room(10, 1);
        assert_eq!(
            enrich(&c, &cfg()).unwrap_err(),
            RegistrationError::TooFewPoints { got: 10, min: 20 }
        );
    }

    #[test]
    fn config_validation() {
        for bad in [
            GicpConfig { neighbors_k: 2, ..cfg() },
            GicpConfig { workers: 0, ..cfg() },
            GicpConfig { max_iterations: 0, ..cfg() },
            GicpConfig { covariance_floor: 0.0, ..cfg() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn self_alignment() {
        let e = enrich(&room(3000, 2), &cfg()).unwrap();
        let r = gicp_align(&e, &e, &Pose::identity(), &cfg()).unwrap();
        assert!(r.converged);
        assert!(r.iterations_used <= 2);
        let (dt, dr) = r.transform.distance_to(&Pose::identity());
        assert!(dt < 1e-9 && dr < 1e-9);
        assert_eq!(r.correspondence_fraction, 1.0);
    }

    #[test]
    fn recovers_known_transform_and_seeding_helps() {
        let src = room(5000, 4);
        let truth = Pose::from_xyz_rpy(0.2, 0.0, 0.0, 0.0, 0.0, 5f64.to_radians());
        let source = enrich(&src, &cfg()).unwrap();
        let target = enrich(&transform_cloud(&src, &truth), &cfg()).unwrap();
        let r = gicp_align(&source, &target, &Pose::identity(), &cfg()).unwrap();
        assert!(r.converged);
        let (dt, dr) = r.transform.distance_to(&truth);
        assert!(dt < 1e-4 && dr.to_degrees() < 0.01, "{dt} {dr}");
        let seeded = gicp_align(&source, &target, &truth, &cfg()).unwrap();
        assert!(seeded.iterations_used <= 2);
        assert!(seeded.iterations_used < r.iterations_used);
        for it in &r.history {
            assert!(it.after <= it.before);
        }
    }

    #[test]
    fn zero_correspondences_echo_guess() {
        let a = enrich(&room(500, 5), &cfg()).unwrap();
        let far = Pose::from_translation(100.0, 0.0, 0.0);
        let b = enrich(&transform_cloud(&a.cloud, &far), &cfg()).unwrap();
        let guess = Pose::from_translation(0.1, 0.0, 0.0);
        let r = gicp_align(&a, &b, &guess, &cfg()).unwrap();
        assert!(!r.converged);
        assert_eq!(r.transform, guess);
        assert_eq!(r.correspondence_fraction, 0.0);
        let empty = EnrichedCloud::empty(0.0, "world");
        let r = gicp_align(&a, &empty, &guess, &cfg()).unwrap();
        assert!(!r.converged && r.transform == guess);
    }

    #[test]
    fn workers_are_deterministic() {
        let c = room(4000, 6);
        let truth = Pose::from_xyz_rpy(0.1, -0.05, 0.02, 0.01, -0.02, 0.05);
        let serial = Gicp::new(cfg()).unwrap();
        let par = Gicp::new(GicpConfig { workers: 4, ..cfg() }).unwrap();
        let (s1, p1) = (serial.enrich(&c).unwrap(), par.enrich(&c).unwrap());
        assert_eq!(s1.covariances(), p1.covariances());
        let moved = transform_cloud(&c, &truth);
        let (s2, p2) = (serial.enrich(&moved).unwrap(), par.enrich(&moved).unwrap());
        let rs = serial.align(&s1, &s2, &Pose::identity());
        let rp = par.align(&p1, &p2, &Pose::identity());
        assert_eq!(rs.transform, rp.transform);
        assert_eq!(rs.history, rp.history);
    }

    #[test]
    fn scan_to_scan_uses_prior_unless_degraded() {
        let c = room(3000, 7);
        let truth = Pose::from_xyz_rpy(0.15, 0.05, 0.0, 0.0, 0.0, 0.03);
        let g = Gicp::new(cfg()).unwrap();
        let prev = g.enrich(&transform_cloud(&c, &truth)).unwrap();
        let curr = g.enrich(&c).unwrap();
        let prior = PriorResult {
            transform: truth,
            source_id: Some("wio".into()),
            degraded_to_identity: false,
        };
        let exact = g.scan_to_scan(&curr, &prev, &prior);
        assert!(exact.iterations_used <= 2);
        let blind = g.scan_to_scan(&curr, &prev, &PriorResult::identity());
        assert!(blind.iterations_used > exact.iterations_used);
        let (dt, dr) = blind.transform.distance_to(&truth);
        assert!(dt < 1e-4 && dr < 1e-4);
    }

    #[test]
    fn submap_equal_to_previous_scan() {
        let c = room(3000, 8);
        let truth = Pose::from_xyz_rpy(0.1, 0.0, 0.0, 0.0, 0.0, 0.02);
        let g = Gicp::new(cfg()).unwrap();
        let prev = g.enrich(&transform_cloud(&c, &truth)).unwrap();
        let curr = g.enrich(&c).unwrap();
        let s2s = g.scan_to_scan(&curr, &prev, &PriorResult::identity());
        let s2m = g.scan_to_submap(&curr, &prev, &Pose::identity(), &s2s);
        let (dt, dr) = s2m.transform.distance_to(&s2s.transform);
        assert!(dt < 1e-6 && dr < 1e-6);
        assert!(s2m.iterations_used <= 2);
        // Anchored: the result stays incremental.
        let anchor = Pose::from_xyz_rpy(5.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let world = g.enrich(&transform_cloud(&prev.cloud, &anchor)).unwrap();
        let anchored = g.scan_to_submap(&curr, &world, &anchor, &s2s);
        let (dt, dr) = anchored.transform.distance_to(&truth);
        assert!(dt < 1e-6 && dr < 1e-6);
        let skipped = g.scan_to_submap(&curr, &EnrichedCloud::empty(0.0, "world"), &anchor, &s2s);
        assert!(skipped.skipped);
        assert_eq!(skipped.transform, s2s.transform);
    }

    #[test]
    fn composition_sanity() {
        let g = Gicp::new(cfg()).unwrap();
        let a = room(4000, 9);
        let t_ab = Pose::from_xyz_rpy(0.1, 0.05, 0.0, 0.0, 0.0, 0.04);
        let t_bc = Pose::from_xyz_rpy(-0.05, 0.1, 0.01, 0.0, 0.01, -0.03);
        let ea = g.enrich(&a).unwrap();
        let eb = g.enrich(&transform_cloud(&a, &t_ab)).unwrap();
        let ec = g.enrich(&transform_cloud(&a, &t_bc.compose(&t_ab))).unwrap();
        let ab = g.align(&ea, &eb, &Pose::identity()).transform;
        let bc = g.align(&eb, &ec, &Pose::identity()).transform;
        let ac = g.align(&ea, &ec, &Pose::identity()).transform;
        // Aligning X onto Y returns T with T * X = Y, so A->C = (B->C) * (A->B).
        let (dt, _) = bc.compose(&ab).distance_to(&ac);
        assert!(dt < 5e-3);
    }

    fn random_problem(seed: u64) -> (GicpProblem, Pose) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |s: f64| Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
        let n = 30;
        let source: Vec<_> = (0..n).map(|_| v(5.0)).collect();
        let target: Vec<_> = (0..n).map(|_| v(5.0)).collect();
        let weights: Vec<_> = (0..n)
            .map(|_| {
                let a = Matrix3::from_fn(|_, _| 0.0) + {
                    let q = v(1.0);
                    q * q.transpose()
                };
                a + Matrix3::identity() * 0.5
            })
            .collect();
        let t = Pose::new(Rotation::from_scaled_axis(&v(1.0)), v(2.0));
        (GicpProblem { source, target, weights }, t)
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..100 {
            let (p, t) = random_problem(seed);
            let g = p.gradient(&t);
            let h = 1e-6;
            for k in 0..6 {
                let mut e = Vector6::zeros();
                e[k] = h;
                let fd = (p.cost(&perturb(&t, &e)) - p.cost(&perturb(&t, &(-e)))) / (2.0 * h);
                let scale = g.norm().max(1.0);
                assert!((fd - g[k]).abs() / scale < 1e-4, "seed {seed} k {k}: {fd} vs {}", g[k]);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn residual_history_is_monotone(seed in 0u64..1000, x in -0.3f64..0.3, yaw in -0.1f64..0.1) {
            let c = room(1500, seed);
            let truth = Pose::from_xyz_rpy(x, 0.0, 0.0, 0.0, 0.0, yaw);
            let g = Gicp::new(cfg()).unwrap();
            let s = g.enrich(&c).unwrap();
            let t = g.enrich(&transform_cloud(&c, &truth)).unwrap();
            let r = g.align(&s, &t, &Pose::identity());
            prop_assert!(r.iterations_used <= 50);
            for it in &r.history {
                prop_assert!(it.after <= it.before);
            }
        }
    }
}
