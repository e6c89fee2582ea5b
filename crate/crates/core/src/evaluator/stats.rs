use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub const DEFAULT_EPS_SCALE: f64 = 1e-6;

#[derive(Clone, Debug)]
enum Inverse {
    Cholesky(Cholesky<f64, Dyn>),
    /// Eigenvalue-floored pseudo-inverse, used when factorization fails.
    Pseudo(DMatrix<f64>),
}

/// Mean and regularized covariance of a point cloud, with the inverse of
/// `covariance + eps * I` prepared for distance queries.
#[derive(Clone, Debug)]
pub struct GaussianStats {
    dim: usize,
    count: usize,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    eps: f64,
    inverse: Inverse,
}

fn to_matrix<P: AsRef<[f64]>>(points: &[P], min: usize) -> Result<DMatrix<f64>> {
    if points.len() < min {
        return Err(Error::Data(format!("need at least {min} points, got {}", points.len())));
    }
    let d = points[0].as_ref().len();
    if d == 0 {
        return Err(Error::Data("points have dimension 0".into()));
    }
    for (i, p) in points.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != d {
            return Err(Error::shape(format!("point {i} has dimension {}, expected {d}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("point {i} has a non-finite coordinate")));
        }
    }
    Ok(DMatrix::from_fn(points.len(), d, |r, c| points[r].as_ref()[c]))
}

/// Column means and the mean-centered copy of `x`.
fn center(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let mut centered = x.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    (mean, centered)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Unbiased covariance of the rows of `centered` (a single row gives zero).
fn covariance(centered: &DMatrix<f64>) -> DMatrix<f64> {
    let mut cov = centered.tr_mul(centered) / (centered.nrows().max(2) - 1) as f64;
    symmetrize(&mut cov);
    cov
}

/// Fits [`GaussianStats`] to at least two equal-length points. The ridge is
/// `eps_scale * trace / d`, or `eps_scale` itself when the trace is zero.
pub fn fit_gaussian_stats<P: AsRef<[f64]>>(points: &[P], eps_scale: f64) -> Result<GaussianStats> {
    if !(eps_scale > 0.0) || !eps_scale.is_finite() {
        return Err(Error::invalid(format!("eps scale must be > 0, got {eps_scale}")));
    }
    let x = to_matrix(points, 2)?;
    let d = x.ncols();
    let (mean, centered) = center(&x);
    let covariance = covariance(&centered);
    let trace = covariance.trace();
    let eps = if trace > 0.0 { eps_scale * trace / d as f64 } else { eps_scale };
    let mut a = covariance.clone();
    for i in 0..d {
        a[(i, i)] += eps;
    }
    let inverse = match Cholesky::new(a.clone()) {
        Some(ch) => Inverse::Cholesky(ch),
        None => Inverse::Pseudo(floored_inverse(a, eps)),
    };
    Ok(GaussianStats {
        dim: d,
        count: points.len(),
        mean,
        covariance,
        eps,
        inverse,
    })
}

fn floored_inverse(a: DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a);
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let floor = eps.max(top * f64::EPSILON * eig.eigenvalues.len() as f64);
    let inv = eig.eigenvalues.map(|l| 1.0 / l.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Diagonal ridge added before inversion.
    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Whether the pseudo-inverse fallback was needed.
    pub fn used_pseudo_inverse(&self) -> bool {
        matches!(self.inverse, Inverse::Pseudo(_))
    }
}

/// `sqrt((p - mean)^T (cov + eps I)^-1 (p - mean))`.
pub fn mahalanobis(stats: &GaussianStats, point: &[f64]) -> Result<f64> {
    if point.len() != stats.dim {
        return Err(Error::shape(format!(
            "point has dimension {}, stats have {}",
            point.len(),
            stats.dim
        )));
    }
    if point.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("query point has a non-finite coordinate".into()));
    }
    let diff = DVector::from_column_slice(point) - &stats.mean;
    let solved = match &stats.inverse {
        Inverse::Cholesky(ch) => ch.solve(&diff),
        Inverse::Pseudo(inv) => inv * &diff,
    };
    Ok(diff.dot(&solved).max(0.0).sqrt())
}

/// Smallest and largest distance of `points` under `stats`.
pub fn distance_band<P: AsRef<[f64]>>(stats: &GaussianStats, points: &[P]) -> Result<(f64, f64)> {
    if points.is_empty() {
        return Err(Error::Data("distance band of no points".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in points {
        let d = mahalanobis(stats, p.as_ref())?;
        lo = lo.min(d);
        hi = hi.max(d);
    }
    Ok((lo, hi))
}

/// Top principal components of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Orthonormal rows, strongest first.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

/// PCA with `k` components. Each component is oriented so that its entry of
/// largest magnitude is positive. When there are fewer points than
/// dimensions the eigenproblem is solved on the Gram matrix instead.
pub fn fit_pca<P: AsRef<[f64]>>(points: &[P], k: usize) -> Result<PcaModel> {
    let x = to_matrix(points, k.max(1))?;
    let (n, d) = x.shape();
    if k == 0 || k > d {
        return Err(Error::invalid(format!("cannot take {k} components of {d}-dimensional points")));
    }
    let (mean, centered) = center(&x);
    let denom = (n.max(2) - 1) as f64;

    let (values, vectors): (Vec<f64>, Vec<DVector<f64>>) = if d <= n {
        let eig = SymmetricEigen::new(covariance(&centered));
        top_k(&eig, k)
            .into_iter()
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned()))
            .unzip()
    } else {
        let mut gram = &centered * centered.transpose() / denom;
        symmetrize(&mut gram);
        let eig = SymmetricEigen::new(gram);
        let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let mut out: (Vec<f64>, Vec<DVector<f64>>) = top_k(&eig, k)
            .into_iter()
            .filter(|&i| eig.eigenvalues[i] > top * 1e-12)
            .map(|i| {
                let v = centered.tr_mul(&eig.eigenvectors.column(i));
                let norm = v.norm();
                (eig.eigenvalues[i], v / norm)
            })
            .unzip();
        // rank-deficient tail: complete with unit vectors orthogonal to the rest
        while out.1.len() < k {
            out.0.push(0.0);
            out.1.push(orthogonal_unit(&out.1, d));
        }
        out
    };

    let components = vectors
        .into_iter()
        .map(|v| {
            let mut v: Vec<f64> = v.iter().cloned().collect();
            let pivot = v
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |acc, (i, x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc })
                .0;
            if v[pivot] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok(PcaModel {
        mean: mean.iter().cloned().collect(),
        components,
        explained_variance: values.into_iter().map(|v| v.max(0.0)).collect(),
    })
}

/// Indices of the `k` largest eigenvalues, descending, lowest index first on ties.
fn top_k(eig: &SymmetricEigen<f64, Dyn>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn orthogonal_unit(basis: &[DVector<f64>], d: usize) -> DVector<f64> {
    for e in 0..d {
        let mut v = DVector::from_fn(d, |i, _| if i == e { 1.0 } else { 0.0 });
        for b in basis {
            let p = b.dot(&v);
            v -= b * p;
        }
        let norm = v.norm();
        if norm > 1e-6 {
            return v / norm;
        }
    }
    unreachable!("fewer than d basis vectors always leave a free direction")
}

/// Coordinates of `point` along the components of `pca`.
pub fn project(pca: &PcaModel, point: &[f64]) -> Result<Vec<f64>> {
    if point.len() != pca.mean.len() {
        return Err(Error::shape(format!(
            "point has dimension {}, PCA has {}",
            point.len(),
            pca.mean.len()
        )));
    }
    Ok(pca
        .components
        .iter()
        .map(|c| c.iter().zip(point).zip(&pca.mean).map(|((w, p), m)| w * (p - m)).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Dense solve by Gaussian elimination with partial pivoting.
    fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for r in col + 1..n {
                let f = a[r][col] / a[col][col];
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
            x[r] = (b[r] - s) / a[r][r];
        }
        x
    }

    fn gaussian_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|i| (0..d).map(|j| normal.sample(&mut rng) * (1.0 + j as f64) + 0.1 * i as f64).collect())
            .collect()
    }

    #[test]
    fn square_corners() {
        let pts = [[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]];
        let s = fit_gaussian_stats(&pts, DEFAULT_EPS_SCALE).unwrap();
        assert_eq!(s.mean(), &[1.0, 1.0]);
        let c = s.covariance();
        assert!((c[(0, 0)] - 4.0 / 3.0).abs() < 1e-12 && (c[(1, 1)] - 4.0 / 3.0).abs() < 1e-12);
        assert!(c[(0, 1)].abs() < 1e-12);
        assert_eq!(s.count(), 4);
    }

    #[test]
    fn one_dimensional() {
        let s = fit_gaussian_stats(&[[0.0], [2.0]], DEFAULT_EPS_SCALE).unwrap();
        assert_eq!(s.mean(), &[1.0]);
        assert_eq!(s.covariance()[(0, 0)], 2.0);
        assert_eq!(mahalanobis(&s, &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fit_gaussian_stats(&[[1.0, 2.0]], DEFAULT_EPS_SCALE).is_err());
        assert!(fit_gaussian_stats(&[vec![1.0, 2.0], vec![1.0]], DEFAULT_EPS_SCALE).is_err());
        let s = fit_gaussian_stats(&[[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]], DEFAULT_EPS_SCALE).unwrap();
        assert!(mahalanobis(&s, &[1.0]).is_err());
        assert!(mahalanobis(&s, &[f64::NAN, 0.0]).is_err());
        assert!(distance_band(&s, &Vec::<Vec<f64>>::new()).is_err());
    }

    #[test]
    fn known_covariances() {
        let pts = [[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let s = fit_gaussian_stats(&pts, DEFAULT_EPS_SCALE).unwrap();
        assert!((s.covariance()[(0, 0)] - 8.0 / 3.0).abs() < 1e-12);
        // unbiased covariance exactly diag(4, 1)
        let scaled = [[2.0 * 1.5f64.sqrt(), 0.0], [-2.0 * 1.5f64.sqrt(), 0.0], [0.0, 1.5f64.sqrt()], [0.0, -1.5f64.sqrt()]];
        let s = fit_gaussian_stats(&scaled, DEFAULT_EPS_SCALE).unwrap();
        assert!((s.covariance()[(0, 0)] - 4.0).abs() < 1e-12);
        assert!((s.covariance()[(1, 1)] - 1.0).abs() < 1e-12);
        // closed form including the ridge: 4/(4+eps) + 1/(1+eps) under the root
        let eps = s.eps();
        assert!((eps - 2.5e-6).abs() < 1e-18);
        let exact = (4.0 / (4.0 + eps) + 1.0 / (1.0 + eps)).sqrt();
        assert!((mahalanobis(&s, &[2.0, 1.0]).unwrap() - exact).abs() < 1e-12);
        assert!((exact - 2f64.sqrt()).abs() < 2e-6);

        let unit = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]].map(|p| p.map(|v| v * 1.5f64.sqrt()));
        let s = fit_gaussian_stats(&unit, DEFAULT_EPS_SCALE).unwrap();
        assert!((mahalanobis(&s, &[3.0, 4.0]).unwrap() - 5.0).abs() < 1e-5);
    }

    #[test]
    fn identical_points_use_the_ridge_only() {
        let pts = vec![vec![1.0, -2.0, 0.5]; 6];
        let s = fit_gaussian_stats(&pts, DEFAULT_EPS_SCALE).unwrap();
        assert_eq!(s.covariance(), &DMatrix::zeros(3, 3));
        assert_eq!(s.eps(), DEFAULT_EPS_SCALE);
        let queries = [[2.0, -2.0, 0.5], [1.0, 0.0, 1.5], [-3.0, 4.0, 0.0]];
        for q in queries {
            let euclid: f64 = q.iter().zip(&pts[0]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let d = mahalanobis(&s, &q).unwrap();
            let ratio = d / euclid;
            assert!((ratio - 1.0 / DEFAULT_EPS_SCALE.sqrt()).abs() < 1e-8 * ratio);
        }
    }

    #[test]
    fn matches_dense_elimination_oracle() {
        let pts = gaussian_points(100, 5, 17);
        let s = fit_gaussian_stats(&pts, DEFAULT_EPS_SCALE).unwrap();
        let n = pts.len() as f64;
        let mean: Vec<f64> = (0..5).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / n).collect();
        let mut a = vec![vec![0.0; 5]; 5];
        for p in &pts {
            for i in 0..5 {
                for j in 0..5 {
                    a[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]) / (n - 1.0);
                }
            }
        }
        let eps = DEFAULT_EPS_SCALE * (0..5).map(|i| a[i][i]).sum::<f64>() / 5.0;
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += eps;
        }
        for q in gaussian_points(100, 5, 99) {
            let diff: Vec<f64> = q.iter().zip(&mean).map(|(x, m)| x - m).collect();
            let sol = solve(a.clone(), diff.clone());
            let oracle = diff.iter().zip(&sol).map(|(x, y)| x * y).sum::<f64>().sqrt();
            let got = mahalanobis(&s, &q).unwrap();
            assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
        }
    }

    #[test]
    fn singular_covariance_in_high_dimension() {
        // 4 points in 10 dims: covariance rank 3, ridge keeps it invertible
        let pts = gaussian_points(4, 10, 3);
        let s = fit_gaussian_stats(&pts, DEFAULT_EPS_SCALE).unwrap();
        let (lo, hi) = distance_band(&s, &pts).unwrap();
        assert!(lo > 0.0 && hi.is_finite());
    }

    #[test]
    fn band_of_single_point_is_zero() {
        let pts = vec![vec![0.5, 0.5]; 2];
        let s = fit_gaussian_stats(&pts, DEFAULT_EPS_SCALE).unwrap();
        assert_eq!(distance_band(&s, &pts[..1]).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn pca_collinear_and_ordering() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0]).collect();
        let p = fit_pca(&pts, 2).unwrap();
        assert!(p.explained_variance[1] < 1e-10);
        assert!(p.explained_variance[0] >= p.explained_variance[1]);
        assert!(p.components[0].iter().all(|v| *v > 0.0));
        assert!(fit_pca(&pts, 3).is_err());
    }

    #[test]
    fn pca_reconstructs_rank_two_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let u = [[1.0, 2.0, 0.0, -1.0, 0.5], [0.0, 1.0, 1.0, 1.0, -2.0]];
        let offset = [3.0, -1.0, 0.0, 2.0, 1.0];
        let pts: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                let (a, b) = (normal.sample(&mut rng), normal.sample(&mut rng));
                (0..5).map(|j| offset[j] + a * u[0][j] + b * u[1][j]).collect()
            })
            .collect();
        for (n, model) in [(30, fit_pca(&pts, 2).unwrap()), (4, fit_pca(&pts[..4], 2).unwrap())] {
            for p in &pts[..n] {
                let z = project(&model, p).unwrap();
                let back: Vec<f64> = (0..5)
                    .map(|j| model.mean[j] + z[0] * model.components[0][j] + z[1] * model.components[1][j])
                    .collect();
                let err: f64 = back.iter().zip(p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-10, "{err}");
            }
        }
    }

    #[test]
    fn gram_route_matches_covariance_route() {
        let pts = gaussian_points(6, 8, 4);
        let gram = fit_pca(&pts, 2).unwrap();
        // pad with duplicate points so n > d and the covariance route is taken
        let padded: Vec<Vec<f64>> = pts.iter().chain(&pts).cloned().collect();
        let cov = fit_pca(&padded, 2).unwrap();
        for k in 0..2 {
            // doubled sums of squares over 11 instead of 5
            assert!((gram.explained_variance[k] * 10.0 - cov.explained_variance[k] * 11.0).abs() < 1e-9);
            for j in 0..8 {
                assert!((gram.components[k][j] - cov.components[k][j]).abs() < 1e-8);
            }
        }
    }

    fn cloud() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..5).prop_flat_map(|d| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), 6..20))
    }

    proptest! {
        #[test]
        fn distance_invariant_under_coordinate_permutation(pts in cloud(), rot in 1usize..4) {
            let d = pts[0].len();
            let perm = |p: &Vec<f64>| -> Vec<f64> { (0..d).map(|j| p[(j + rot) % d]).collect() };
            let a = fit_gaussian_stats(&pts, DEFAULT_EPS_SCALE).unwrap();
            let permuted: Vec<Vec<f64>> = pts.iter().map(perm).collect();
            let b = fit_gaussian_stats(&permuted, DEFAULT_EPS_SCALE).unwrap();
            for q in &pts {
                let x = mahalanobis(&a, q).unwrap();
                let y = mahalanobis(&b, &perm(q)).unwrap();
                prop_assert!((x - y).abs() <= 1e-6 * (1.0 + x));
            }
            prop_assert!(mahalanobis(&a, a.mean()).unwrap() < 1e-12);
        }

        #[test]
        fn pca_invariants(pts in cloud()) {
            let d = pts[0].len();
            let model = fit_pca(&pts, 2).unwrap();
            let c = &model.components;
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            prop_assert!((dot(&c[0], &c[0]) - 1.0).abs() < 1e-8);
            prop_assert!((dot(&c[1], &c[1]) - 1.0).abs() < 1e-8);
            prop_assert!(dot(&c[0], &c[1]).abs() < 1e-8);
            prop_assert!(model.explained_variance[0] >= model.explained_variance[1]);
            let n = pts.len() as f64;
            let total: f64 = (0..d)
                .map(|j| {
                    let m = pts.iter().map(|p| p[j]).sum::<f64>() / n;
                    pts.iter().map(|p| (p[j] - m).powi(2)).sum::<f64>() / (n - 1.0)
                })
                .sum();
            prop_assert!(model.explained_variance.iter().sum::<f64>() <= total + 1e-10);
            let proj: Vec<Vec<f64>> = pts.iter().map(|p| project(&model, p).unwrap()).collect();
            for k in 0..2 {
                let mean = proj.iter().map(|z| z[k]).sum::<f64>() / n;
                prop_assert!(mean.abs() < 1e-10);
            }
            prop_assert!(project(&model, &model.mean).unwrap().iter().all(|v| *v == 0.0));
        }

        #[test]
        fn projection_is_affine(pts in cloud(), t in -3.0f64..3.0) {
            let model = fit_pca(&pts, 2).unwrap();
            let (a, b) = (&pts[0], &pts[1]);
            let mid: Vec<f64> = a.iter().zip(b).map(|(x, y)| y + t * (x - y)).collect();
            let (pa, pb, pm) = (project(&model, a).unwrap(), project(&model, b).unwrap(), project(&model, &mid).unwrap());
            for k in 0..2 {
                prop_assert!((pm[k] - (pb[k] + t * (pa[k] - pb[k]))).abs() < 1e-9);
            }
        }
    }
}
