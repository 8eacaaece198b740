//! Two-covariance PLDA: `x = mean + y + e` with speaker variable `y ~ N(0, B)`
//! and residual `e ~ N(0, W)`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PLDA";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct PldaModel {
    mean: DVector<f64>,
    between: DMatrix<f64>,
    within: DMatrix<f64>,
    /// Rows map centred vectors into a basis where `W = I` and `B` is diagonal.
    transform: DMatrix<f64>,
    psi: DVector<f64>,
}

impl PartialEq for PldaModel {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.between == other.between && self.within == other.within
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1e-300);
    (m - m.transpose()).amax() <= 1e-9 * scale
}

impl PldaModel {
    pub fn new(mean: DVector<f64>, between: DMatrix<f64>, within: DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 {
            return Err(Error::invalid("PLDA dimension must be positive"));
        }
        if between.shape() != (dim, dim) || within.shape() != (dim, dim) {
            return Err(Error::shape("PLDA covariance shape does not match mean"));
        }
        if mean
            .iter()
            .chain(between.iter())
            .chain(within.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite("PLDA parameters"));
        }
        if !is_symmetric(&between) || !is_symmetric(&within) {
            return Err(Error::invalid("PLDA covariances must be symmetric"));
        }
        let chol = within
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("within-speaker covariance is not positive definite"))?;
        let l_inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(dim, dim))
            .ok_or_else(|| Error::invalid("within-speaker covariance is singular"))?;
        let reduced = &l_inv * &between * l_inv.transpose();
        let reduced = (&reduced + reduced.transpose()) * 0.5;
        let eig = SymmetricEigen::new(reduced);
        let tol = 1e-9 * eig.eigenvalues.amax().max(1.0);
        if eig.eigenvalues.iter().any(|&v| v < -tol) {
            return Err(Error::invalid(
                "between-speaker covariance is not positive semidefinite",
            ));
        }
        let psi = eig.eigenvalues.map(|v| v.max(0.0));
        let transform = eig.eigenvectors.transpose() * l_inv;
        Ok(Self {
            mean,
            between,
            within,
            transform,
            psi,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn between(&self) -> &DMatrix<f64> {
        &self.between
    }

    pub fn within(&self) -> &DMatrix<f64> {
        &self.within
    }

    /// Coordinates in the simultaneously diagonalising basis.
    pub fn project(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!(
                "embedding dim {} does not match PLDA dim {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(&self.transform * (DVector::from_column_slice(x) - &self.mean))
    }

    /// Same-speaker versus different-speaker log-likelihood ratio of two projected vectors.
    pub fn score_projected(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let mut llr = 0.0;
        for d in 0..self.dim() {
            let psi = self.psi[d];
            let a = 1.0 + psi;
            let det = a * a - psi * psi;
            let (x, y) = (u[d], v[d]);
            let sq = x * x + y * y;
            llr += -0.5 * det.ln() + a.ln() - (a * sq - 2.0 * psi * (x * y)) / (2.0 * det)
                + sq / (2.0 * a);
        }
        llr
    }

    pub fn score(&self, e1: &[f64], e2: &[f64]) -> Result<f64> {
        Ok(self.score_projected(&self.project(e1)?, &self.project(e2)?))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        let d = self.dim();
        let mut values: Vec<f64> = self.mean.iter().copied().collect();
        for m in [&self.between, &self.within] {
            for i in 0..d {
                for j in 0..d {
                    values.push(m[(i, j)]);
                }
            }
        }
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let malformed = |m: &str| Error::MalformedModel(m.to_string());
        let mut head = [0u8; 12];
        r.read_exact(&mut head)
            .map_err(|_| malformed("truncated header"))?;
        if &head[..4] != MAGIC {
            return Err(malformed("bad magic"));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(malformed(&format!("unsupported version {version}")));
        }
        let d = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut values = vec![0.0; d + 2 * d * d];
        let mut buf = [0u8; 8];
        for v in values.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| malformed("truncated payload"))?;
            *v = f64::from_le_bytes(buf);
        }
        let mean = DVector::from_column_slice(&values[..d]);
        let between = DMatrix::from_row_slice(d, d, &values[d..d + d * d]);
        let within = DMatrix::from_row_slice(d, d, &values[d + d * d..]);
        Self::new(mean, between, within)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Fits the model from embeddings grouped by speaker.
///
/// `B` is the covariance of speaker means about the global mean and `W` the
/// pooled within-speaker covariance plus a ridge of `1e-6 * tr(W) / dim`.
pub fn plda_train(groups: &[Vec<Vec<f64>>]) -> Result<PldaModel> {
    if groups.len() < 2 {
        return Err(Error::invalid("PLDA training needs at least 2 speakers"));
    }
    if groups.iter().any(|g| g.len() < 2) {
        return Err(Error::invalid(
            "PLDA training needs at least 2 segments per speaker",
        ));
    }
    let dim = groups[0][0].len();
    if dim == 0 || groups.iter().flatten().any(|x| x.len() != dim) {
        return Err(Error::shape(
            "PLDA training embeddings must share one positive dim",
        ));
    }
    if groups.iter().flatten().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("PLDA training embeddings"));
    }
    let total: usize = groups.iter().map(Vec::len).sum();
    let mut mean = DVector::zeros(dim);
    for x in groups.iter().flatten() {
        mean += DVector::from_column_slice(x);
    }
    mean /= total as f64;

    let mut between = DMatrix::zeros(dim, dim);
    let mut within = DMatrix::zeros(dim, dim);
    for g in groups {
        let mut m = DVector::zeros(dim);
        for x in g {
            m += DVector::from_column_slice(x);
        }
        m /= g.len() as f64;
        let dm = &m - &mean;
        between += &dm * dm.transpose();
        for x in g {
            let dx = DVector::from_column_slice(x) - &m;
            within += &dx * dx.transpose();
        }
    }
    between /= groups.len() as f64;
    within /= total as f64;
    let ridge = (1e-6 * within.trace() / dim as f64).max(1e-10);
    for i in 0..dim {
        within[(i, i)] += ridge;
    }
    let between = (&between + between.transpose()) * 0.5;
    let within = (&within + within.transpose()) * 0.5;
    PldaModel::new(mean, between, within)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit(d: usize) -> PldaModel {
        PldaModel::new(
            DVector::zeros(d),
            DMatrix::identity(d, d),
            DMatrix::identity(d, d),
        )
        .unwrap()
    }

    /// Log density of a zero-mean Gaussian, computed directly.
    fn log_normal(x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let n = x.len() as f64;
        let chol = cov.clone().cholesky().unwrap();
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let sol = chol.solve(x);
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + x.dot(&sol))
    }

    /// Joint-Gaussian route to the LLR, independent of the diagonalised form.
    fn joint_llr(model: &PldaModel, a: &[f64], b: &[f64]) -> f64 {
        let d = model.dim();
        let (bm, wm) = (model.between(), model.within());
        let tot = bm + wm;
        let mut same = DMatrix::zeros(2 * d, 2 * d);
        let mut diff = DMatrix::zeros(2 * d, 2 * d);
        same.view_mut((0, 0), (d, d)).copy_from(&tot);
        same.view_mut((d, d), (d, d)).copy_from(&tot);
        same.view_mut((0, d), (d, d)).copy_from(bm);
        same.view_mut((d, 0), (d, d)).copy_from(bm);
        diff.view_mut((0, 0), (d, d)).copy_from(&tot);
        diff.view_mut((d, d), (d, d)).copy_from(&tot);
        let mut x = DVector::zeros(2 * d);
        for i in 0..d {
            x[i] = a[i] - model.mean()[i];
            x[d + i] = b[i] - model.mean()[i];
        }
        log_normal(&x, &same) - log_normal(&x, &diff)
    }

    #[test]
    fn scalar_closed_form() {
        let s = unit(1).score(&[0.0], &[0.0]).unwrap();
        assert!((s - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((s - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn matches_joint_gaussian_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let a = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        let c = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        let between = &a * a.transpose();
        let within = &c * c.transpose() + DMatrix::identity(d, d) * 0.1;
        let mean = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let model = PldaModel::new(mean, between, within).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let s = model.score(&x, &y).unwrap();
            assert!((s - joint_llr(&model, &x, &y)).abs() < 1e-8 * s.abs().max(1.0));
            assert_eq!(s, model.score(&y, &x).unwrap());
        }
    }

    #[test]
    fn self_score_grows_with_distance_when_between_dominates() {
        let model = PldaModel::new(
            DVector::zeros(2),
            DMatrix::identity(2, 2) * 10.0,
            DMatrix::identity(2, 2) * 0.1,
        )
        .unwrap();
        let mut prev = f64::NEG_INFINITY;
        for k in 0..20 {
            let x = [0.25 * k as f64, 0.1 * k as f64];
            let s = model.score(&x, &x).unwrap();
            assert!(s > prev);
            prev = s;
        }
    }

    #[test]
    fn repeated_points_give_ridge_within() {
        let groups = vec![vec![vec![1.0, 2.0]; 3], vec![vec![-1.0, 0.0]; 3]];
        let m = plda_train(&groups).unwrap();
        assert!(m.within().amax() <= 1e-10 + 1e-15);
        assert!((m.within()[(0, 0)] - 1e-10).abs() < 1e-15);
    }

    #[test]
    fn identical_speaker_means_give_zero_between() {
        let groups = vec![
            vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            vec![vec![0.0, 1.0], vec![0.0, -1.0]],
        ];
        let m = plda_train(&groups).unwrap();
        assert!(m.between().amax() < 1e-15);
    }

    #[test]
    fn training_preconditions() {
        assert!(plda_train(&[vec![vec![0.0], vec![1.0]]]).is_err());
        assert!(plda_train(&[vec![vec![0.0], vec![1.0]], vec![vec![2.0]]]).is_err());
        assert!(
            plda_train(&[vec![vec![0.0], vec![1.0]], vec![vec![2.0, 1.0], vec![3.0]]]).is_err()
        );
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(unit(2).score(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn rejects_indefinite_within() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(PldaModel::new(DVector::zeros(2), DMatrix::identity(2, 2), w).is_err());
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(PldaModel::new(DVector::zeros(2), b, DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let groups = vec![
            vec![vec![1.0, 2.0, 0.5], vec![1.5, 2.5, 0.0]],
            vec![vec![-1.0, 0.0, 0.3], vec![-1.2, 0.4, 0.1]],
            vec![vec![0.0, 0.0, 1.0], vec![0.1, -0.2, 1.3]],
        ];
        let m = plda_train(&groups).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PLDA");
        assert_eq!(buf.len(), 12 + 8 * (3 + 18));
        assert_eq!(PldaModel::read_from(&buf[..]).unwrap(), m);
        assert!(PldaModel::read_from(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(PldaModel::read_from(&bad[..]).is_err());
    }
}
